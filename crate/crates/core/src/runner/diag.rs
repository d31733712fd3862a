//! Post-training diagnostics on encoded test sets.

use std::fmt::Write as _;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::eval::{evaluate_retrieval, RetrievalMetrics};
use crate::error::{invalid, Result};
use crate::framing;
use crate::numgrad::{argmax, Graph, Matrix};
use crate::simset::{cosine_matrix, l2_normalize, EmbeddingSet, Scoring, SimilarityKind};

/// Retrieval with each single query-side slot and with the full set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotAblation {
    pub full: RetrievalMetrics,
    pub singletons: Vec<RetrievalMetrics>,
}

impl SlotAblation {
    pub fn best_singleton_rsum(&self) -> f64 {
        self.singletons
            .iter()
            .map(RetrievalMetrics::rsum)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Retrieval using only the `mask`ed rows of every image set, scored by the
/// best-matching pair against the full caption sets.
pub fn masked_retrieval(
    image_sets: &[EmbeddingSet],
    text_sets: &[EmbeddingSet],
    relevance: &Matrix,
    mask: &[usize],
) -> Result<RetrievalMetrics> {
    if mask.is_empty() {
        return Err(invalid("empty slot mask"));
    }
    let restricted = image_sets
        .iter()
        .map(|s| s.select(mask))
        .collect::<Result<Vec<_>>>()?;
    evaluate_retrieval(
        &restricted,
        text_sets,
        relevance,
        Scoring::Kind(SimilarityKind::Mil),
    )
}

pub fn slot_ablation(
    image_sets: &[EmbeddingSet],
    text_sets: &[EmbeddingSet],
    relevance: &Matrix,
) -> Result<SlotAblation> {
    let k = image_sets
        .first()
        .ok_or_else(|| invalid("no image sets"))?
        .k();
    let full: Vec<usize> = (0..k).collect();
    Ok(SlotAblation {
        full: masked_retrieval(image_sets, text_sets, relevance, &full)?,
        singletons: (0..k)
            .map(|s| masked_retrieval(image_sets, text_sets, relevance, &[s]))
            .collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerSlotRetrieval {
    /// `top1[q][s]`: gallery index retrieved by slot `s` of query `q`.
    pub top1: Vec<Vec<usize>>,
    /// Mean over queries of (distinct items retrieved) / K.
    pub distinct_rate: f64,
}

/// Each query slot independently retrieves the gallery item holding its
/// most similar element.
pub fn per_slot_retrieval(
    queries: &[EmbeddingSet],
    gallery: &[EmbeddingSet],
) -> Result<PerSlotRetrieval> {
    let first = queries.first().ok_or_else(|| invalid("no queries"))?;
    if gallery.is_empty() {
        return Err(invalid("empty gallery"));
    }
    let k = first.k();
    let mut top1 = Vec::with_capacity(queries.len());
    let mut rate = 0.0;
    for q in queries {
        let best_per_item: Vec<Vec<f64>> = gallery
            .iter()
            .map(|t| {
                let cos = cosine_matrix(q, t)?;
                Ok((0..cos.rows())
                    .map(|r| cos.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .collect())
            })
            .collect::<Result<_>>()?;
        let picks: Vec<usize> = (0..q.k())
            .map(|s| argmax(&best_per_item.iter().map(|b| b[s]).collect::<Vec<_>>()).0)
            .collect();
        let mut distinct = picks.clone();
        distinct.sort_unstable();
        distinct.dedup();
        rate += distinct.len() as f64 / k as f64;
        top1.push(picks);
    }
    Ok(PerSlotRetrieval {
        top1,
        distinct_rate: rate / queries.len() as f64,
    })
}

/// Mean `K x K` cosine matrix (image slot by caption slot) over positive pairs.
pub fn mean_pair_heatmap(
    image_sets: &[EmbeddingSet],
    text_sets: &[EmbeddingSet],
    pairs: &[(usize, usize)],
) -> Result<Matrix> {
    let (&(i0, j0), rest) = pairs
        .split_first()
        .ok_or_else(|| invalid("no positive pairs"))?;
    let mut acc = cosine_matrix(&image_sets[i0], &text_sets[j0])?;
    for &(i, j) in rest {
        acc.add_assign(&cosine_matrix(&image_sets[i], &text_sets[j])?);
    }
    let n = pairs.len() as f64;
    Ok(acc.map(|v| v / n))
}

pub fn heatmap_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}

/// Writes `path` (CSV) and a `.json` metadata file next to it.
pub fn heatmap_export(m: &Matrix, meta: &serde_json::Value, path: &Path) -> Result<()> {
    framing::write_file(path, heatmap_csv(m).as_bytes())?;
    let meta = serde_json::json!({ "k": m.rows(), "meta": meta });
    framing::write_file(
        &path.with_extension("json"),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )
}

/// Histogram over image slots of which slot holds the best-matching element
/// for each positive pair.
pub fn slot_usage(
    image_sets: &[EmbeddingSet],
    text_sets: &[EmbeddingSet],
    pairs: &[(usize, usize)],
) -> Result<Vec<usize>> {
    let k = image_sets
        .first()
        .ok_or_else(|| invalid("no image sets"))?
        .k();
    let mut hist = vec![0; k];
    for &(i, j) in pairs {
        let cos = cosine_matrix(&image_sets[i], &text_sets[j])?;
        let (flat, _) = argmax(cos.as_slice());
        hist[flat / cos.cols()] += 1;
    }
    Ok(hist)
}

/// Result of the convexity check on `L(x) = log sum_y exp(alpha x.y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JensenReport {
    /// Smallest `(1/n) sum L(x_i) - L(mean x)` over the trials.
    pub min_gap: f64,
    /// Largest entrywise gap between the softmax-weighted closed form and
    /// the autodiff gradient.
    pub max_grad_err: f64,
}

pub const JENSEN_DIM: usize = 8;
const JENSEN_GRAD_DRAWS: usize = 10;

fn log_sum_exp_dot(x: &[f64], ys: &Matrix, alpha: f64) -> f64 {
    let z: Vec<f64> = (0..ys.rows())
        .map(|r| alpha * ys.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `sum_y softmax(alpha x.y) alpha y`.
pub fn jensen_closed_form_grad(x: &[f64], ys: &Matrix, alpha: f64) -> Vec<f64> {
    let z: Vec<f64> = (0..ys.rows())
        .map(|r| alpha * ys.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = w.iter().sum();
    (0..ys.cols())
        .map(|c| {
            (0..ys.rows())
                .map(|r| w[r] / total * alpha * ys[(r, c)])
                .sum()
        })
        .collect()
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    l2_normalize(&Matrix::from_fn(rows, cols, |_, _| {
        StandardNormal.sample(&mut *rng)
    }))
}

pub fn jensen_check(
    n_trials: usize,
    n: usize,
    k_other: usize,
    alpha: f64,
    seed: u64,
) -> Result<JensenReport> {
    if !(alpha > 0.0) || n == 0 || k_other == 0 {
        return Err(invalid("jensen_check needs alpha > 0 and nonempty sets"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_gap = f64::INFINITY;
    for _ in 0..n_trials {
        let ys = unit_rows(&mut rng, k_other, JENSEN_DIM);
        let xs = unit_rows(&mut rng, n, JENSEN_DIM);
        let mean: Vec<f64> = (0..JENSEN_DIM)
            .map(|c| (0..n).map(|r| xs[(r, c)]).sum::<f64>() / n as f64)
            .collect();
        let avg = (0..n)
            .map(|r| log_sum_exp_dot(xs.row(r), &ys, alpha))
            .sum::<f64>()
            / n as f64;
        min_gap = min_gap.min(avg - log_sum_exp_dot(&mean, &ys, alpha));
    }

    let mut max_grad_err: f64 = 0.0;
    for _ in 0..JENSEN_GRAD_DRAWS {
        let ys = unit_rows(&mut rng, k_other, JENSEN_DIM);
        let x = Matrix::from_fn(1, JENSEN_DIM, |_, _| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let xn = g.param(x.clone());
        let yn = g.constant(ys.transpose());
        let z = g.matmul(xn, yn)?;
        let z = g.scale(z, alpha);
        let e = g.exp(z);
        let s = g.sum(e);
        let l = g.log(s)?;
        let auto = g.backward(l)?.wrt(xn);
        let closed = jensen_closed_form_grad(x.as_slice(), &ys, alpha);
        for (a, c) in auto.as_slice().iter().zip(&closed) {
            max_grad_err = max_grad_err.max((a - c).abs());
        }
    }
    Ok(JensenReport {
        min_gap,
        max_grad_err,
    })
}
