//! Training, retrieval evaluation and diagnostics.

mod diag;
mod eval;
mod optim;
mod train;

pub use diag::{
    heatmap_csv, heatmap_export, jensen_check, jensen_closed_form_grad, masked_retrieval,
    mean_pair_heatmap, per_slot_retrieval, slot_ablation, slot_usage, JensenReport,
    PerSlotRetrieval, SlotAblation, JENSEN_DIM,
};
pub use eval::{
    circular_variance, ensemble_average, evaluate_retrieval, evaluate_scores,
    mean_circular_variance, RetrievalMetrics, RECALL_KS,
};
pub use optim::{adam_step, adam_update, AdamConfig, AdamState};
pub use train::{
    encode_dataset, evaluate_encoder, train, EncodedDataset, EvalScoring, MetricsRecord, RunDir,
    TimingRecord, TrainConfig, TrainOutcome,
};
