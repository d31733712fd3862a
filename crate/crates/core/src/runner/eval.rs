use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numgrad::Matrix;
use crate::simset::{batch_scores, EmbeddingSet, Scoring, UNIT_NORM_TOL};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Recall@{1,5,10} in percent for both directions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub i2t: [f64; 3],
    pub t2i: [f64; 3],
}

impl RetrievalMetrics {
    pub fn rsum(&self) -> f64 {
        self.i2t.iter().chain(&self.t2i).sum()
    }
}

/// Rank of the best positive, counting strictly better items plus equal
/// items with a smaller index.
fn best_positive_rank(scores: &[f64], positive: impl Fn(usize) -> bool) -> Option<usize> {
    let best = (0..scores.len())
        .filter(|&j| positive(j))
        .min_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)))?;
    let s = scores[best];
    Some(
        scores
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > s || (v == s && j < best))
            .count(),
    )
}

fn recalls(ranks: &[usize]) -> [f64; 3] {
    RECALL_KS.map(|k| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
}

/// Recall from an `images x captions` score matrix and 0/1 relevance of the
/// same shape. Every image and every caption needs at least one positive.
pub fn evaluate_scores(scores: &Matrix, relevance: &Matrix) -> Result<RetrievalMetrics> {
    if scores.shape() != relevance.shape() {
        return Err(Error::ShapeMismatch {
            op: "evaluate_retrieval",
            left: scores.shape(),
            right: relevance.shape(),
        });
    }
    let (n, m) = scores.shape();
    if n == 0 || m == 0 {
        return Err(invalid("empty score matrix"));
    }
    let mut i2t = Vec::with_capacity(n);
    for i in 0..n {
        let rel = relevance.row(i);
        let r = best_positive_rank(scores.row(i), |j| rel[j] > 0.0)
            .ok_or_else(|| invalid(format!("image query {i} has no positive caption")))?;
        i2t.push(r);
    }
    let st = scores.transpose();
    let rt = relevance.transpose();
    let mut t2i = Vec::with_capacity(m);
    for j in 0..m {
        let rel = rt.row(j);
        let r = best_positive_rank(st.row(j), |i| rel[i] > 0.0)
            .ok_or_else(|| invalid(format!("caption query {j} has no positive image")))?;
        t2i.push(r);
    }
    Ok(RetrievalMetrics {
        i2t: recalls(&i2t),
        t2i: recalls(&t2i),
    })
}

/// Scores image sets against caption sets and evaluates retrieval.
pub fn evaluate_retrieval(
    image_sets: &[EmbeddingSet],
    text_sets: &[EmbeddingSet],
    relevance: &Matrix,
    scoring: Scoring,
) -> Result<RetrievalMetrics> {
    evaluate_scores(&batch_scores(image_sets, text_sets, scoring)?, relevance)
}

/// `1 - ||mean row||^2` of a set of unit rows.
pub fn circular_variance(set: &EmbeddingSet) -> Result<f64> {
    let e = set.elements();
    for r in 0..e.rows() {
        let n: f64 = e.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Domain {
                op: "circular_variance",
                detail: format!("row {r} has norm {n}"),
            });
        }
    }
    if (1..e.rows()).all(|r| e.row(r) == e.row(0)) {
        return Ok(0.0);
    }
    let k = e.rows() as f64;
    let sq: f64 = (0..e.cols())
        .map(|c| {
            let m = (0..e.rows()).map(|r| e[(r, c)]).sum::<f64>() / k;
            m * m
        })
        .sum();
    Ok((1.0 - sq).clamp(0.0, 1.0))
}

/// Mean circular variance over sets.
pub fn mean_circular_variance(sets: &[EmbeddingSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(invalid("no sets"));
    }
    let mut acc = 0.0;
    for s in sets {
        acc += circular_variance(s)?;
    }
    Ok(acc / sets.len() as f64)
}

pub fn ensemble_average(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ensemble_average",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(a.zip_map(b, |x, y| 0.5 * (x + y)))
}
