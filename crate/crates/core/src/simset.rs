//! Set-to-set similarity functions.
//!
//! Every function comes in two forms: a value form over [`EmbeddingSet`]s or
//! raw cosine blocks, used at evaluation, and a graph form over
//! [`NodeId`]s, used in training. The batched graph form scores all
//! `N x N'` pairs of a batch from one stacked cosine matrix.

use serde::{Deserialize, Serialize};

use crate::assign::{block_assign, hungarian_max, Assignment};
use crate::error::{invalid, Error, Result};
use crate::numgrad::{Axis, Graph, Matrix, NodeId, L2_EPS};

pub const DEFAULT_CHAMFER_ALPHA: f64 = 16.0;

/// Tolerance on row norms of a normalized set.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// One sample's `K x D` embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    elements: Matrix,
    normalized: bool,
}

impl EmbeddingSet {
    pub fn new(elements: Matrix) -> Result<Self> {
        if elements.rows() == 0 || elements.cols() == 0 {
            return Err(invalid(format!(
                "embedding set must be at least 1x1, got {:?}",
                elements.shape()
            )));
        }
        let normalized = rows_unit_norm(&elements);
        Ok(Self {
            elements,
            normalized,
        })
    }

    /// Builds a set with rows scaled to unit norm (zero rows stay zero).
    pub fn normalized(elements: Matrix) -> Result<Self> {
        let mut set = Self::new(l2_normalize(&elements))?;
        set.normalized = rows_unit_norm(&set.elements);
        Ok(set)
    }

    pub fn elements(&self) -> &Matrix {
        &self.elements
    }

    pub fn into_elements(self) -> Matrix {
        self.elements
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn k(&self) -> usize {
        self.elements.rows()
    }

    pub fn dim(&self) -> usize {
        self.elements.cols()
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("empty row selection"));
        }
        let mut m = Matrix::zeros(rows.len(), self.dim());
        for (i, &r) in rows.iter().enumerate() {
            if r >= self.k() {
                return Err(invalid(format!(
                    "row {r} out of range for K = {}",
                    self.k()
                )));
            }
            m.row_mut(i).copy_from_slice(self.elements.row(r));
        }
        Self::new(m)
    }
}

fn rows_unit_norm(m: &Matrix) -> bool {
    m.iter_rows().all(|r| {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        (n - 1.0).abs() <= UNIT_NORM_TOL
    })
}

/// Row-wise L2 normalization with the same zero-row convention as the graph
/// primitive.
pub fn l2_normalize(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < L2_EPS {
            row.fill(0.0);
        } else {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimilarityKind {
    /// Maximum pairwise cosine.
    Mil,
    /// Log-sum-exp smoothed bidirectional Chamfer with scale `alpha`.
    SmoothChamfer { alpha: f64 },
    /// Exponentially scaled optimal one-to-one matching.
    MaxMatch,
}

impl SimilarityKind {
    pub fn smooth_chamfer() -> Self {
        Self::SmoothChamfer {
            alpha: DEFAULT_CHAMFER_ALPHA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::SmoothChamfer { alpha } if !(alpha > 0.0) => Err(Error::Domain {
                op: "smooth_chamfer",
                detail: format!("alpha must be positive, got {alpha}"),
            }),
            _ => Ok(()),
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            Self::Mil => "mil",
            Self::SmoothChamfer { .. } => "sc",
            Self::MaxMatch => "maxmatch",
        }
    }

    /// Parses `mil`, `sc` (default alpha) or `maxmatch`.
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mil" => Ok(Self::Mil),
            "sc" | "smooth_chamfer" => Ok(Self::smooth_chamfer()),
            "maxmatch" | "max_match" => Ok(Self::MaxMatch),
            other => Err(invalid(format!("unknown similarity kind {other:?}"))),
        }
    }
}

fn check_dims(v: &EmbeddingSet, t: &EmbeddingSet) -> Result<()> {
    if v.dim() != t.dim() {
        return Err(Error::ShapeMismatch {
            op: "cosine_matrix",
            left: v.elements.shape(),
            right: t.elements.shape(),
        });
    }
    Ok(())
}

/// `K_v x K_t` cosine similarities.
pub fn cosine_matrix(v: &EmbeddingSet, t: &EmbeddingSet) -> Result<Matrix> {
    check_dims(v, t)?;
    let a = if v.normalized {
        v.elements.clone()
    } else {
        l2_normalize(&v.elements)
    };
    let b = if t.normalized {
        t.elements.clone()
    } else {
        l2_normalize(&t.elements)
    };
    a.matmul(&b.transpose())
}

pub fn mil_from_cos(cos: &Matrix) -> f64 {
    cos.as_slice()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn smooth_chamfer_from_cos(cos: &Matrix, alpha: f64) -> f64 {
    let (r, c) = cos.shape();
    let mut row_term = 0.0;
    for i in 0..r {
        let s: f64 = cos.row(i).iter().map(|&x| (alpha * x).exp()).sum();
        row_term += s.ln();
    }
    let mut col_term = 0.0;
    for j in 0..c {
        let s: f64 = (0..r).map(|i| (alpha * cos[(i, j)]).exp()).sum();
        col_term += s.ln();
    }
    row_term / (2.0 * alpha * r as f64) + col_term / (2.0 * alpha * c as f64)
}

/// `(1/K) * sum over matched (exp(cos) - 1)`, given the matching.
pub fn maxmatch_from_assignment(cos: &Matrix, a: &Assignment) -> f64 {
    let k = a.k() as f64;
    a.perm
        .iter()
        .enumerate()
        .map(|(m, &n)| cos[(m, n)].exp() - 1.0)
        .sum::<f64>()
        / k
}

pub fn maxmatch_from_cos(cos: &Matrix) -> Result<(f64, Assignment)> {
    let a = hungarian_max(cos)?;
    Ok((maxmatch_from_assignment(cos, &a), a))
}

/// Mean of the `k` largest entries.
pub fn topk_from_cos(cos: &Matrix, k: usize) -> Result<f64> {
    let n = cos.len();
    if k == 0 || k > n {
        return Err(invalid(format!("top-k needs 1 <= k <= {n}, got {k}")));
    }
    let mut vals = cos.as_slice().to_vec();
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(vals[..k].iter().sum::<f64>() / k as f64)
}

pub fn mil_similarity(v: &EmbeddingSet, t: &EmbeddingSet) -> Result<f64> {
    Ok(mil_from_cos(&cosine_matrix(v, t)?))
}

pub fn smooth_chamfer(v: &EmbeddingSet, t: &EmbeddingSet, alpha: f64) -> Result<f64> {
    SimilarityKind::SmoothChamfer { alpha }.validate()?;
    Ok(smooth_chamfer_from_cos(&cosine_matrix(v, t)?, alpha))
}

pub fn maxmatch_similarity(v: &EmbeddingSet, t: &EmbeddingSet) -> Result<(f64, Assignment)> {
    if v.k() != t.k() {
        return Err(invalid(format!(
            "max-match needs equal set sizes, got {} and {}",
            v.k(),
            t.k()
        )));
    }
    maxmatch_from_cos(&cosine_matrix(v, t)?)
}

/// Evaluation-time score: mean of the `k` largest cosines, no matching.
pub fn inference_topk_similarity(v: &EmbeddingSet, t: &EmbeddingSet, k: usize) -> Result<f64> {
    topk_from_cos(&cosine_matrix(v, t)?, k)
}

pub fn similarity(v: &EmbeddingSet, t: &EmbeddingSet, kind: SimilarityKind) -> Result<f64> {
    match kind {
        SimilarityKind::Mil => mil_similarity(v, t),
        SimilarityKind::SmoothChamfer { alpha } => smooth_chamfer(v, t, alpha),
        SimilarityKind::MaxMatch => Ok(maxmatch_similarity(v, t)?.0),
    }
}

/// How a gallery is scored at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scoring {
    Kind(SimilarityKind),
    TopK(usize),
}

fn stack(sets: &[EmbeddingSet], what: &str) -> Result<(Matrix, usize, usize)> {
    let first = sets
        .first()
        .ok_or_else(|| invalid(format!("empty {what} collection")))?;
    let (k, d) = (first.k(), first.dim());
    let mut data = Vec::with_capacity(sets.len() * k * d);
    for s in sets {
        if s.k() != k || s.dim() != d {
            return Err(invalid(format!(
                "heterogeneous {what} sets: expected {k}x{d}, found {}x{}",
                s.k(),
                s.dim()
            )));
        }
        let m = if s.normalized {
            s.elements.clone()
        } else {
            l2_normalize(&s.elements)
        };
        data.extend_from_slice(m.as_slice());
    }
    Ok((Matrix::from_vec(sets.len() * k, d, data)?, k, d))
}

/// Stacked `(N*K) x (N'*K)` cosine matrix of two homogeneous collections.
pub fn stacked_cosine(vs: &[EmbeddingSet], ts: &[EmbeddingSet]) -> Result<(Matrix, usize, usize)> {
    let (a, kv, dv) = stack(vs, "query")?;
    let (b, kt, dt) = stack(ts, "gallery")?;
    if dv != dt {
        return Err(Error::ShapeMismatch {
            op: "batch_similarity",
            left: (kv, dv),
            right: (kt, dt),
        });
    }
    Ok((a.matmul(&b.transpose())?, kv, kt))
}

/// `N x N'` score matrix, entry `(i, j)` scoring `vs[i]` against `ts[j]`.
pub fn batch_scores(vs: &[EmbeddingSet], ts: &[EmbeddingSet], scoring: Scoring) -> Result<Matrix> {
    let (cos, kv, kt) = stacked_cosine(vs, ts)?;
    let (n, m) = (vs.len(), ts.len());
    match scoring {
        Scoring::Kind(SimilarityKind::MaxMatch) => {
            if kv != kt {
                return Err(invalid("max-match needs equal set sizes"));
            }
            let grid = block_assign(&cos, kv)?;
            Ok(Matrix::from_fn(n, m, |i, j| {
                maxmatch_from_assignment(&cos.block(i * kv, j * kt, kv, kt), grid.get(i, j))
            }))
        }
        Scoring::Kind(kind) => {
            kind.validate()?;
            let mut out = Matrix::zeros(n, m);
            for i in 0..n {
                for j in 0..m {
                    let b = cos.block(i * kv, j * kt, kv, kt);
                    out[(i, j)] = match kind {
                        SimilarityKind::Mil => mil_from_cos(&b),
                        SimilarityKind::SmoothChamfer { alpha } => {
                            smooth_chamfer_from_cos(&b, alpha)
                        }
                        SimilarityKind::MaxMatch => unreachable!(),
                    };
                }
            }
            Ok(out)
        }
        Scoring::TopK(k) => {
            let mut out = Matrix::zeros(n, m);
            for i in 0..n {
                for j in 0..m {
                    out[(i, j)] = topk_from_cos(&cos.block(i * kv, j * kt, kv, kt), k)?;
                }
            }
            Ok(out)
        }
    }
}

pub fn batch_similarity(
    vs: &[EmbeddingSet],
    ts: &[EmbeddingSet],
    kind: SimilarityKind,
) -> Result<Matrix> {
    batch_scores(vs, ts, Scoring::Kind(kind))
}

// ---------------------------------------------------------------------------
// Graph forms
// ---------------------------------------------------------------------------

/// Differentiable cosine matrix between the rows of `v` and `t`.
pub fn cosine_node(g: &mut Graph, v: NodeId, t: NodeId) -> Result<NodeId> {
    let (vr, vc) = g.shape(v);
    let (tr, tc) = g.shape(t);
    if vc != tc {
        return Err(Error::ShapeMismatch {
            op: "cosine_matrix",
            left: (vr, vc),
            right: (tr, tc),
        });
    }
    let vn = g.l2_normalize_rows(v);
    let tn = g.l2_normalize_rows(t);
    let tt = g.transpose(tn);
    g.matmul(vn, tt)
}

pub fn mil_node(g: &mut Graph, cos: NodeId) -> NodeId {
    g.max_all(cos)
}

pub fn smooth_chamfer_node(g: &mut Graph, cos: NodeId, alpha: f64) -> Result<NodeId> {
    SimilarityKind::SmoothChamfer { alpha }.validate()?;
    let (r, c) = g.shape(cos);
    let scaled = g.scale(cos, alpha);
    let e = g.exp(scaled);
    let rows = g.sum_axis(e, Axis::Cols);
    let rows = g.log(rows)?;
    let rows = g.sum(rows);
    let rows = g.scale(rows, 1.0 / (2.0 * alpha * r as f64));
    let cols = g.sum_axis(e, Axis::Rows);
    let cols = g.log(cols)?;
    let cols = g.sum(cols);
    let cols = g.scale(cols, 1.0 / (2.0 * alpha * c as f64));
    g.add(rows, cols)
}

/// Max-match similarity of one `K x K` cosine block. The matching is solved
/// on detached values; gradient reaches only the matched entries.
pub fn maxmatch_node(g: &mut Graph, cos: NodeId) -> Result<(NodeId, Assignment)> {
    let assignment = hungarian_max(g.value(cos))?;
    let k = assignment.k();
    let masked = g.mask_mul(cos, assignment.mask())?;
    let e = g.exp(masked);
    let e = g.offset(e, -1.0);
    let s = g.sum(e);
    Ok((g.scale(s, 1.0 / k as f64), assignment))
}

/// `n x (n*k)` matrix with ones where column `c` belongs to block `c / k`.
pub fn block_indicator(n: usize, k: usize) -> Matrix {
    Matrix::from_fn(n, n * k, |i, c| if c / k == i { 1.0 } else { 0.0 })
}

/// Scores every pair of a batch. `v` is `(N*K) x D` and `t` is `(N'*K) x D`,
/// each a vertical stack of sets.
pub fn batch_similarity_node(
    g: &mut Graph,
    v: NodeId,
    t: NodeId,
    k: usize,
    kind: SimilarityKind,
) -> Result<NodeId> {
    kind.validate()?;
    let (vr, tr) = (g.shape(v).0, g.shape(t).0);
    if k == 0 || vr % k != 0 || tr % k != 0 {
        return Err(invalid(format!(
            "stacked sets of {vr} and {tr} rows are not divisible by K = {k}"
        )));
    }
    let (n, m) = (vr / k, tr / k);
    let cos = cosine_node(g, v, t)?;
    match kind {
        SimilarityKind::Mil => {
            // Max within each column block, then within each row block.
            let a = g.reshape(cos, n * k * m, k)?;
            let a = g.max_axis(a, Axis::Cols);
            let a = g.reshape(a, n * k, m)?;
            let a = g.transpose(a);
            let a = g.reshape(a, m * n, k)?;
            let a = g.max_axis(a, Axis::Cols);
            let a = g.reshape(a, m, n)?;
            Ok(g.transpose(a))
        }
        SimilarityKind::SmoothChamfer { alpha } => {
            let p = g.constant(block_indicator(n, k));
            let q = g.constant(block_indicator(m, k).transpose());
            let scaled = g.scale(cos, alpha);
            let e = g.exp(scaled);
            // Sum over y in gallery block j for each query element x.
            let rows = g.matmul(e, q)?;
            let rows = g.log(rows)?;
            let rows = g.matmul(p, rows)?;
            let rows = g.scale(rows, 1.0 / (2.0 * alpha * k as f64));
            // Sum over x in query block i for each gallery element y.
            let cols = g.matmul(p, e)?;
            let cols = g.log(cols)?;
            let cols = g.matmul(cols, q)?;
            let cols = g.scale(cols, 1.0 / (2.0 * alpha * k as f64));
            g.add(rows, cols)
        }
        SimilarityKind::MaxMatch => {
            let mask = block_assign(g.value(cos), k)?.mask();
            let p = g.constant(block_indicator(n, k));
            let q = g.constant(block_indicator(m, k).transpose());
            let masked = g.mask_mul(cos, mask)?;
            let e = g.exp(masked);
            let e = g.offset(e, -1.0);
            let pooled = g.matmul(p, e)?;
            let pooled = g.matmul(pooled, q)?;
            Ok(g.scale(pooled, 1.0 / k as f64))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{finite_diff_check, DEFAULT_STEP};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(rows: &[&[f64]]) -> EmbeddingSet {
        EmbeddingSet::new(Matrix::from_rows(rows)).unwrap()
    }

    fn random_set(rng: &mut ChaCha8Rng, k: usize, d: usize) -> EmbeddingSet {
        EmbeddingSet::normalized(Matrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let e = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(cosine_matrix(&e, &e).unwrap(), Matrix::identity(2));
        let v = set(&[&[1.0, 0.0]]);
        let t = set(&[&[0.6, 0.8]]);
        assert_eq!(cosine_matrix(&v, &t).unwrap().as_slice(), &[0.6]);
    }

    #[test]
    fn cosine_dimension_mismatch() {
        let v = set(&[&[1.0, 0.0]]);
        let t = set(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(
            cosine_matrix(&v, &t),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn empty_set_rejected() {
        assert!(EmbeddingSet::new(Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn mil_examples() {
        let v = set(&[&[1.0, 0.0]]);
        let t = set(&[&[0.8, 0.6]]);
        assert!((mil_similarity(&v, &t).unwrap() - 0.8).abs() < 1e-15);
        let v = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let t = set(&[&[0.6, 0.8]]);
        assert_eq!(mil_similarity(&v, &t).unwrap(), 0.8);
    }

    #[test]
    fn chamfer_singleton_is_cosine() {
        let v = set(&[&[1.0, 0.0]]);
        let t = set(&[&[0.6, 0.8]]);
        for alpha in [0.5, 1.0, 16.0] {
            assert!((smooth_chamfer(&v, &t, alpha).unwrap() - 0.6).abs() < 1e-14);
        }
    }

    #[test]
    fn chamfer_two_vs_one() {
        let v = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let t = set(&[&[1.0, 0.0]]);
        let expected = 0.25 + 0.5 * (std::f64::consts::E + 1.0).ln();
        let got = smooth_chamfer(&v, &t, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-14);
        assert!((got - 0.9066).abs() < 1e-4);
    }

    #[test]
    fn chamfer_rejects_nonpositive_alpha() {
        let v = set(&[&[1.0, 0.0]]);
        assert!(smooth_chamfer(&v, &v, 0.0).is_err());
        assert!(smooth_chamfer(&v, &v, -1.0).is_err());
    }

    #[test]
    fn chamfer_large_alpha_approaches_hard_chamfer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let alpha = 64.0;
        let mut total_gap = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let v = random_set(&mut rng, 4, 8);
            let t = random_set(&mut rng, 4, 8);
            let cos = cosine_matrix(&v, &t).unwrap();
            let row_max: f64 = (0..4)
                .map(|i| cos.row(i).iter().copied().fold(f64::MIN, f64::max))
                .sum::<f64>()
                / 4.0;
            let col_max: f64 = (0..4)
                .map(|j| (0..4).map(|i| cos[(i, j)]).fold(f64::MIN, f64::max))
                .sum::<f64>()
                / 4.0;
            let hard = 0.5 * (row_max + col_max);
            let soft = smooth_chamfer(&v, &t, alpha).unwrap();
            let gap = soft - hard;
            // log-sum-exp exceeds the max by at most ln(K) / alpha.
            assert!(gap >= 0.0 && gap <= 4f64.ln() / alpha, "{soft} vs {hard}");
            total_gap += gap;
        }
        // Near-ties between the top two cosines occasionally push a single
        // draw past 1e-3; on average the soft form sits well inside it.
        assert!(
            total_gap / trials as f64 <= 1e-3,
            "{}",
            total_gap / trials as f64
        );
    }

    #[test]
    fn maxmatch_examples() {
        let v = set(&[&[1.0, 0.0]]);
        let t = set(&[&[0.6, 0.8]]);
        let (s, _) = maxmatch_similarity(&v, &t).unwrap();
        assert!((s - (0.6f64.exp() - 1.0)).abs() < 1e-15);

        for k in 1..=5 {
            let e = EmbeddingSet::new(Matrix::identity(k)).unwrap();
            let (s, a) = maxmatch_similarity(&e, &e).unwrap();
            assert_eq!(a.perm, (0..k).collect::<Vec<_>>());
            assert!((s - (std::f64::consts::E - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn maxmatch_rejects_unequal_sizes() {
        let v = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let t = set(&[&[1.0, 0.0]]);
        assert!(maxmatch_similarity(&v, &t).is_err());
    }

    #[test]
    fn topk_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = random_set(&mut rng, 4, 8);
        let t = random_set(&mut rng, 4, 8);
        assert_eq!(
            inference_topk_similarity(&v, &t, 1).unwrap(),
            mil_similarity(&v, &t).unwrap()
        );
        let e = EmbeddingSet::new(Matrix::identity(2)).unwrap();
        assert_eq!(inference_topk_similarity(&e, &e, 4).unwrap(), 0.5);
        assert!(inference_topk_similarity(&e, &e, 0).is_err());
        assert!(inference_topk_similarity(&e, &e, 5).is_err());
    }

    #[test]
    fn graph_forms_match_value_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let v = random_set(&mut rng, 4, 6);
        let t = random_set(&mut rng, 4, 6);
        let mut g = Graph::new();
        let vn = g.param(v.elements().clone());
        let tn = g.param(t.elements().clone());
        let cos = cosine_node(&mut g, vn, tn).unwrap();
        let mil = mil_node(&mut g, cos);
        let sc = smooth_chamfer_node(&mut g, cos, 16.0).unwrap();
        let (mm, _) = maxmatch_node(&mut g, cos).unwrap();
        assert!((g.value(mil).item() - mil_similarity(&v, &t).unwrap()).abs() < 1e-14);
        assert!((g.value(sc).item() - smooth_chamfer(&v, &t, 16.0).unwrap()).abs() < 1e-12);
        assert!((g.value(mm).item() - maxmatch_similarity(&v, &t).unwrap().0).abs() < 1e-14);
    }

    #[test]
    fn chamfer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let v = Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        let t = Matrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        let err = finite_diff_check(
            |g, p| {
                let c = cosine_node(g, p[0], p[1])?;
                smooth_chamfer_node(g, c, 16.0)
            },
            &[v, t],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn batch_single_pair_equals_pair_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_set(&mut rng, 4, 8);
        let t = random_set(&mut rng, 4, 8);
        for kind in [
            SimilarityKind::Mil,
            SimilarityKind::smooth_chamfer(),
            SimilarityKind::MaxMatch,
        ] {
            let b = batch_similarity(&[v.clone()], &[t.clone()], kind).unwrap();
            assert_eq!(b.shape(), (1, 1));
            assert_eq!(b.item(), similarity(&v, &t, kind).unwrap());
        }
    }

    #[test]
    fn batch_rejects_heterogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_set(&mut rng, 4, 8);
        let b = random_set(&mut rng, 3, 8);
        assert!(batch_similarity(&[a.clone(), b], &[a], SimilarityKind::Mil).is_err());
    }
}
