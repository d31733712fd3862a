//! Oracle suites behind `setsim check`.

use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assign::{brute_force_assignment, hungarian_max};
use crate::encoder::{EncoderConfig, Modality, ParamNodes, SetEncoder};
use crate::error::Result;
use crate::numgrad::{finite_diff_check, Graph, Matrix, NodeId, DEFAULT_STEP};
use crate::objectives::{
    combined_loss_node, contrastive_infonce_node, diversity_regularizer_node,
    global_discriminative_node, intra_set_divergence_node, mmd_gaussian_node, triplet_hardest_node,
    Bandwidth, BatchNodes, LossConfig, TripletMining,
};
use crate::runner::jensen_check;
use crate::simset::{cosine_node, maxmatch_node, smooth_chamfer_node, SimilarityKind};

/// Outcome of one named check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckLine {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

pub fn all_passed(lines: &[CheckLine]) -> bool {
    lines.iter().all(|l| l.passed)
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Hungarian scores equal brute-force enumeration exactly, for `trials`
/// random matrices at each `K` in `ks`.
pub fn assignment_suite(ks: &[usize], trials: usize, seed: u64) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = Vec::new();
    for &k in ks {
        let start = Instant::now();
        let mut mismatches = 0;
        for _ in 0..trials {
            let m = uniform(&mut rng, k, k);
            if hungarian_max(&m)?.score != brute_force_assignment(&m)?.score {
                mismatches += 1;
            }
        }
        lines.push(CheckLine::new(
            format!("assign K={k}"),
            mismatches == 0,
            format!(
                "{mismatches}/{trials} mismatches in {:.3}s",
                start.elapsed().as_secs_f64()
            ),
        ));
    }
    Ok(lines)
}

/// Tolerance for single operators and losses.
pub const OP_GRAD_TOL: f64 = 1e-5;
/// Tolerance for the full encoder-to-loss graph.
pub const MODEL_GRAD_TOL: f64 = 1e-4;

type Builder = fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

/// Weighted readout `sum(w .* x)` turning a matrix node into a scalar.
fn readout(g: &mut Graph, x: NodeId, w: &Matrix) -> Result<NodeId> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Builder, Vec<Matrix>)> {
    let (k, d, n) = (3, 5, 3);
    vec![
        (
            "cosine_matrix",
            (|g, p| {
                let c = cosine_node(g, p[0], p[1])?;
                let w = Matrix::from_fn(3, 4, |i, j| ((i * 4 + j) as f64 * 0.37).sin());
                readout(g, c, &w)
            }) as Builder,
            vec![uniform(rng, 3, d), uniform(rng, 4, d)],
        ),
        (
            "smooth_chamfer",
            |g, p| {
                let c = cosine_node(g, p[0], p[1])?;
                smooth_chamfer_node(g, c, 16.0)
            },
            vec![uniform(rng, k, d), uniform(rng, 4, d)],
        ),
        (
            "maxmatch_similarity",
            |g, p| {
                let c = cosine_node(g, p[0], p[1])?;
                Ok(maxmatch_node(g, c)?.0)
            },
            vec![uniform(rng, k, d), uniform(rng, k, d)],
        ),
        (
            "triplet_hardest",
            |g, p| triplet_hardest_node(g, p[0], 0.2),
            vec![uniform(rng, n, n)],
        ),
        (
            "global_discriminative",
            |g, p| global_discriminative_node(g, p[0], p[1], p[2], p[3], 3, 0.6, 0.5),
            vec![
                uniform(rng, n * k, d),
                uniform(rng, n, d),
                uniform(rng, n * k, d),
                uniform(rng, n, d),
            ],
        ),
        (
            "intra_set_divergence",
            |g, p| intra_set_divergence_node(g, p[0], p[1], 3, 0.6, 0.5),
            vec![uniform(rng, n * k, d), uniform(rng, n * k, d)],
        ),
        (
            "diversity_regularizer",
            |g, p| diversity_regularizer_node(g, p[0], 3),
            vec![uniform(rng, n * k, d)],
        ),
        (
            "mmd_gaussian",
            |g, p| mmd_gaussian_node(g, p[0], p[1], Bandwidth::Fixed(1.3)),
            vec![uniform(rng, 4, d), uniform(rng, 5, d)],
        ),
        (
            "contrastive_infonce",
            |g, p| contrastive_infonce_node(g, p[0], 0.5),
            vec![uniform(rng, n, n)],
        ),
    ]
}

fn tiny_model() -> EncoderConfig {
    EncoderConfig {
        k: 3,
        d: 6,
        d_raw: 5,
        blocks: 2,
    }
}

/// Finite-difference check of the full encoder-to-combined-loss graph on a
/// two-sample batch. Returns the worst relative error.
pub fn model_gradient_error(kind: SimilarityKind, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = SetEncoder::init(tiny_model(), seed)?;
    // Nonzero second layers so every path carries gradient.
    for (_, p) in enc.params.iter_mut() {
        for v in p.as_mut_slice() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
    }
    let images: Vec<Matrix> = (0..2).map(|i| uniform(&mut rng, 3 + i, 5)).collect();
    let captions: Vec<Matrix> = (0..2).map(|i| uniform(&mut rng, 2 + i, 5)).collect();
    let names: Vec<String> = enc.params.iter().map(|(n, _)| n.clone()).collect();
    let values: Vec<Matrix> = enc.params.iter().map(|(_, m)| m.clone()).collect();
    let cfg = LossConfig {
        lambda_con: 0.5,
        mmd_bandwidth: Bandwidth::Fixed(1.0),
        ..LossConfig::default()
    };
    let f = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
        let nodes = ParamNodes::from_named(names.iter().cloned().zip(ids.iter().copied()));
        let ir: Vec<&Matrix> = images.iter().collect();
        let tr: Vec<&Matrix> = captions.iter().collect();
        let img = enc.encode_nodes(g, &nodes, Modality::Image, &ir)?;
        let txt = enc.encode_nodes(g, &nodes, Modality::Text, &tr)?;
        let batch = BatchNodes {
            k: enc.config.k,
            image_sets: img.sets,
            text_sets: txt.sets,
            image_globals: img.globals,
            text_globals: txt.globals,
            image_residual: img.residual,
            text_residual: txt.residual,
        };
        Ok(combined_loss_node(g, &batch, &cfg, kind, TripletMining::MeanNegatives)?.0)
    };
    finite_diff_check(f, &values, DEFAULT_STEP)
}

/// Finite-difference checks of every operator and loss, plus the full
/// model for each similarity kind, over `seeds` seeds.
pub fn gradient_suite(seeds: u64) -> Result<Vec<CheckLine>> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, (name, f, params)) in op_cases(&mut rng).into_iter().enumerate() {
            let err = finite_diff_check(f, &params, DEFAULT_STEP)?;
            if worst.len() <= i {
                worst.push((name, err));
            } else {
                worst[i].1 = worst[i].1.max(err);
            }
        }
    }
    let mut lines: Vec<CheckLine> = worst
        .into_iter()
        .map(|(name, err)| {
            CheckLine::new(name, err < OP_GRAD_TOL, format!("max rel err {err:.3e}"))
        })
        .collect();
    for kind in [
        SimilarityKind::Mil,
        SimilarityKind::smooth_chamfer(),
        SimilarityKind::MaxMatch,
    ] {
        let mut err: f64 = 0.0;
        for seed in 0..seeds {
            err = err.max(model_gradient_error(kind, seed)?);
        }
        lines.push(CheckLine::new(
            format!("full model ({})", kind.short_name()),
            err < MODEL_GRAD_TOL,
            format!("max rel err {err:.3e}"),
        ));
    }
    Ok(lines)
}

/// Convexity gap and closed-form gradient of the log-sum-exp term.
pub fn jensen_suite(trials: usize, seed: u64) -> Result<Vec<CheckLine>> {
    let r = jensen_check(trials, 4, 4, 16.0, seed)?;
    Ok(vec![
        CheckLine::new(
            "jensen gap",
            r.min_gap >= -1e-12,
            format!("min gap {:.3e}", r.min_gap),
        ),
        CheckLine::new(
            "jensen gradient",
            r.max_grad_err < 1e-8,
            format!("max abs err {:.3e}", r.max_grad_err),
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_on_small_budgets() {
        assert!(all_passed(&assignment_suite(&[2, 3, 4], 50, 1).unwrap()));
        let g = gradient_suite(2).unwrap();
        assert!(all_passed(&g), "{g:?}");
        assert!(all_passed(&jensen_suite(50, 2).unwrap()));
    }
}
