use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::diag::slot_usage;
use super::eval::{evaluate_retrieval, mean_circular_variance, RetrievalMetrics};
use super::optim::{adam_step, AdamConfig, AdamState};
use crate::encoder::{checkpoint_bytes, EncoderConfig, Modality, SetEncoder};
use crate::error::{invalid, Error, Result};
use crate::numgrad::{Graph, Matrix};
use crate::objectives::{combined_loss_node, BatchNodes, LossBreakdown, LossConfig, TripletMining};
use crate::simset::{EmbeddingSet, Scoring, SimilarityKind};
use crate::synthdata::Dataset;

/// Score function used for evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scoring", rename_all = "snake_case")]
pub enum EvalScoring {
    /// The training similarity, except max-match models are ranked by the
    /// mean of the `K` largest element cosines.
    #[default]
    Auto,
    Similarity {
        kind: SimilarityKind,
    },
    TopK {
        k: usize,
    },
}

impl EvalScoring {
    pub fn resolve(self, kind: SimilarityKind, k: usize) -> Scoring {
        match self {
            EvalScoring::Auto => match kind {
                SimilarityKind::MaxMatch => Scoring::TopK(k),
                other => Scoring::Kind(other),
            },
            EvalScoring::Similarity { kind } => Scoring::Kind(kind),
            EvalScoring::TopK { k } => Scoring::TopK(k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: SimilarityKind,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Epochs trained with mean-over-negatives triplet before hardest mining.
    pub warmup_epochs: usize,
    pub model: EncoderConfig,
    /// Fraction of images (taken from the end) held out for evaluation.
    pub test_fraction: f64,
    pub eval_scoring: EvalScoring,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    /// Cosine-decay the step size to zero over training.
    pub cosine_schedule: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: SimilarityKind::MaxMatch,
            loss: LossConfig::default(),
            epochs: 200,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            seed: 0,
            warmup_epochs: 1,
            model: EncoderConfig::default(),
            test_fraction: 0.2,
            eval_scoring: EvalScoring::Auto,
            eval_every: 1,
            cosine_schedule: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(invalid(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every must be positive"));
        }
        if self.loss.lambda_isd > 0.0 && self.model.k < 2 {
            return Err(invalid("intra-set divergence needs K >= 2"));
        }
        Ok(())
    }
}

/// One epoch of the metrics log. Contains no wall-clock values, so logs are
/// reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub loss: LossBreakdown,
    pub recall: Option<RetrievalMetrics>,
    pub rsum: Option<f64>,
    pub circ_var_image: Option<f64>,
    pub circ_var_text: Option<f64>,
    pub slot_usage: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub wall_clock_secs: f64,
}

/// Encoded sets of a whole dataset.
#[derive(Clone, Debug)]
pub struct EncodedDataset {
    pub images: Vec<EmbeddingSet>,
    pub captions: Vec<EmbeddingSet>,
    pub relevance: Matrix,
    /// `(image, caption)` positive pairs.
    pub pairs: Vec<(usize, usize)>,
}

pub fn encode_dataset(enc: &SetEncoder, ds: &Dataset) -> Result<EncodedDataset> {
    let img_raw: Vec<&Matrix> = ds.images.iter().map(|i| &i.locals).collect();
    let cap_raw: Vec<&Matrix> = ds.captions.iter().map(|c| &c.locals).collect();
    let images = enc
        .encode(Modality::Image, &img_raw)?
        .into_iter()
        .map(|e| e.set)
        .collect();
    let captions = enc
        .encode(Modality::Text, &cap_raw)?
        .into_iter()
        .map(|e| e.set)
        .collect();
    Ok(EncodedDataset {
        images,
        captions,
        relevance: ds.relevance(),
        pairs: ds
            .captions
            .iter()
            .enumerate()
            .map(|(j, c)| (c.image_id, j))
            .collect(),
    })
}

pub struct TrainOutcome {
    pub encoder: SetEncoder,
    pub best: SetEncoder,
    pub best_epoch: Option<usize>,
    pub records: Vec<MetricsRecord>,
}

/// Where training writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.jsonl")
    }
    pub fn final_ckpt(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
    pub fn best_ckpt(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
}

struct Logs {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

impl Logs {
    fn create(run: &RunDir) -> Result<Self> {
        fs::create_dir_all(&run.dir)?;
        Ok(Self {
            metrics: BufWriter::new(File::create(run.metrics())?),
            timing: BufWriter::new(File::create(run.timing())?),
        })
    }
}

fn checkpoint_meta(cfg: &TrainConfig, epoch: usize) -> serde_json::Value {
    serde_json::json!({
        "kind": cfg.kind.short_name(),
        "seed": cfg.seed,
        "epoch": epoch,
    })
}

/// Forward and backward pass on one batch; returns the loss terms and
/// applies an optimizer step.
fn train_step(
    enc: &mut SetEncoder,
    state: &mut AdamState,
    cfg: &TrainConfig,
    images: &[&Matrix],
    captions: &[&Matrix],
    mining: TripletMining,
    lr: f64,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let nodes = enc.load_params(&mut g);
    let img = enc.encode_nodes(&mut g, &nodes, Modality::Image, images)?;
    let txt = enc.encode_nodes(&mut g, &nodes, Modality::Text, captions)?;
    let batch = BatchNodes {
        k: enc.config.k,
        image_sets: img.sets,
        text_sets: txt.sets,
        image_globals: img.globals,
        text_globals: txt.globals,
        image_residual: img.residual,
        text_residual: txt.residual,
    };
    let (loss, breakdown) = combined_loss_node(&mut g, &batch, &cfg.loss, cfg.kind, mining)?;
    if let Some(term) = breakdown.non_finite_term() {
        return Err(Error::NonFinite {
            term: term.to_string(),
        });
    }
    let grads = g.backward(loss)?;
    adam_step(
        &mut enc.params,
        |name| Ok(grads.wrt(nodes.get(name)?)),
        state,
        &cfg.optimizer,
        lr,
    )?;
    Ok(breakdown)
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown) {
    let add = |a: &mut Option<f64>, v: Option<f64>| {
        if let Some(v) = v {
            *a = Some(a.unwrap_or(0.0) + v);
        }
    };
    acc.total += b.total;
    acc.triplet += b.triplet;
    add(&mut acc.gd, b.gd);
    add(&mut acc.isd, b.isd);
    add(&mut acc.mmd, b.mmd);
    add(&mut acc.div, b.div);
    add(&mut acc.con, b.con);
}

fn scale_breakdown(b: &mut LossBreakdown, s: f64) {
    b.total *= s;
    b.triplet *= s;
    for v in [&mut b.gd, &mut b.isd, &mut b.mmd, &mut b.div, &mut b.con].into_iter().flatten() {
        *v *= s;
    }
}

/// Evaluation record fields for an encoder on the test split.
pub fn evaluate_encoder(
    enc: &SetEncoder,
    test: &Dataset,
    scoring: Scoring,
) -> Result<(RetrievalMetrics, f64, f64, Vec<usize>)> {
    let e = encode_dataset(enc, test)?;
    let recall = evaluate_retrieval(&e.images, &e.captions, &e.relevance, scoring)?;
    let cv_i = mean_circular_variance(&e.images)?;
    let cv_t = mean_circular_variance(&e.captions)?;
    let usage = slot_usage(&e.images, &e.captions, &e.pairs)?;
    Ok((recall, cv_i, cv_t, usage))
}

/// Trains both encoders on the training split of `ds`, evaluating on the
/// held-out split. With `run` set, writes the metrics log, a separate timing
/// log and the final and best-RSUM checkpoints.
pub fn train(cfg: &TrainConfig, ds: &Dataset, run: Option<&RunDir>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.model.d_raw != ds.d_raw() {
        return Err(invalid(format!(
            "model expects d_raw = {}, data has {}",
            cfg.model.d_raw,
            ds.d_raw()
        )));
    }
    let (train_ds, test_ds) = ds.split(cfg.test_fraction)?;
    if train_ds.images.len() < 2 {
        return Err(invalid("training split needs at least two images"));
    }
    if test_ds.images.is_empty() {
        return Err(invalid("test split is empty"));
    }
    let by_image = train_ds.captions_by_image();
    if let Some(i) = by_image.iter().position(Vec::is_empty) {
        return Err(invalid(format!("training image {i} has no caption")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut enc = SetEncoder::init(cfg.model.clone(), rng.next_u64())?;
    let mut state = AdamState::new(&enc.params);
    let scoring = cfg.eval_scoring.resolve(cfg.kind, cfg.model.k);
    let mut logs = run.map(Logs::create).transpose()?;

    let n = train_ds.images.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, SetEncoder)> = None;
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mining = if epoch < cfg.warmup_epochs {
            TripletMining::MeanNegatives
        } else {
            TripletMining::Hardest
        };
        let mut acc = LossBreakdown::default();
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let images: Vec<&Matrix> = chunk.iter().map(|&i| &train_ds.images[i].locals).collect();
            let captions: Vec<&Matrix> = chunk
                .iter()
                .map(|&i| {
                    let caps = &by_image[i];
                    &train_ds.captions[caps[rng.random_range(0..caps.len())]].locals
                })
                .collect();
            let lr = if cfg.cosine_schedule {
                let t = state.step as f64 / total_steps as f64;
                cfg.optimizer.lr * 0.5 * (1.0 + (PI * t).cos())
            } else {
                cfg.optimizer.lr
            };
            let b = train_step(&mut enc, &mut state, cfg, &images, &captions, mining, lr)?;
            accumulate(&mut acc, &b);
            batches += 1;
        }
        scale_breakdown(&mut acc, 1.0 / batches.max(1) as f64);

        let last = epoch + 1 == cfg.epochs;
        let mut record = MetricsRecord {
            epoch,
            loss: acc,
            recall: None,
            rsum: None,
            circ_var_image: None,
            circ_var_text: None,
            slot_usage: None,
        };
        if last || (epoch + 1) % cfg.eval_every == 0 {
            let (recall, cv_i, cv_t, usage) = evaluate_encoder(&enc, &test_ds, scoring)?;
            let rsum = recall.rsum();
            if best.as_ref().is_none_or(|b| rsum > b.0) {
                best = Some((rsum, epoch, enc.clone()));
            }
            record.recall = Some(recall);
            record.rsum = Some(rsum);
            record.circ_var_image = Some(cv_i);
            record.circ_var_text = Some(cv_t);
            record.slot_usage = Some(usage);
        }
        if let Some(logs) = logs.as_mut() {
            serde_json::to_writer(&mut logs.metrics, &record)?;
            logs.metrics.write_all(b"\n")?;
            let timing = TimingRecord {
                epoch,
                wall_clock_secs: started.elapsed().as_secs_f64(),
            };
            serde_json::to_writer(&mut logs.timing, &timing)?;
            logs.timing.write_all(b"\n")?;
        }
        records.push(record);
    }

    let (best_epoch, best_enc) = match best {
        Some((_, e, b)) => (Some(e), b),
        None => (None, enc.clone()),
    };
    if let (Some(run), Some(mut logs)) = (run, logs) {
        logs.metrics.flush()?;
        logs.timing.flush()?;
        let last_epoch = cfg.epochs.saturating_sub(1);
        write_bytes(
            &run.final_ckpt(),
            &checkpoint_bytes(&enc, &checkpoint_meta(cfg, last_epoch))?,
        )?;
        let meta = checkpoint_meta(cfg, best_epoch.unwrap_or(last_epoch));
        write_bytes(&run.best_ckpt(), &checkpoint_bytes(&best_enc, &meta)?)?;
    }
    Ok(TrainOutcome {
        encoder: enc,
        best: best_enc,
        best_epoch,
        records,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}
