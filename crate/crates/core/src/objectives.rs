//! Training losses.
//!
//! All losses are built on a [`Graph`]; the plain-value wrappers evaluate
//! the same graph over constant leaves. Sets are passed as vertical stacks:
//! `N` sets of `K x D` become one `(N*K) x D` node.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numgrad::{Axis, Graph, Matrix, NodeId};
use crate::simset::{batch_similarity_node, EmbeddingSet, SimilarityKind};

/// Stand-in for minus infinity on masked-out diagonal entries.
const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the pooled samples.
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub triplet_margin: f64,
    pub gd_margin: f64,
    pub isd_margin: f64,
    pub exp_scale: f64,
    pub lambda_gd: f64,
    pub lambda_isd: f64,
    pub lambda_mmd: f64,
    pub lambda_div: f64,
    pub lambda_con: f64,
    pub temperature: f64,
    pub mmd_bandwidth: Bandwidth,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            triplet_margin: 0.2,
            gd_margin: 0.6,
            isd_margin: 0.6,
            exp_scale: 0.5,
            lambda_gd: 0.1,
            lambda_isd: 0.1,
            lambda_mmd: 0.01,
            lambda_div: 0.01,
            lambda_con: 0.0,
            temperature: 0.05,
            mmd_bandwidth: Bandwidth::MedianHeuristic,
        }
    }
}

impl LossConfig {
    /// Triplet only, every regularizer disabled.
    pub fn triplet_only(margin: f64) -> Self {
        Self {
            triplet_margin: margin,
            lambda_gd: 0.0,
            lambda_isd: 0.0,
            lambda_mmd: 0.0,
            lambda_div: 0.0,
            lambda_con: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [
            ("triplet_margin", self.triplet_margin),
            ("gd_margin", self.gd_margin),
            ("isd_margin", self.isd_margin),
        ] {
            if !(0.0..=1.0).contains(&m) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {m}")));
            }
        }
        if !(self.exp_scale > 0.0) {
            return Err(invalid("exp_scale must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        for (name, l) in [
            ("lambda_gd", self.lambda_gd),
            ("lambda_isd", self.lambda_isd),
            ("lambda_mmd", self.lambda_mmd),
            ("lambda_div", self.lambda_div),
            ("lambda_con", self.lambda_con),
        ] {
            if !(l >= 0.0) {
                return Err(invalid(format!("{name} must be nonnegative, got {l}")));
            }
        }
        if let Bandwidth::Fixed(h) = self.mmd_bandwidth {
            if !(h > 0.0) {
                return Err(invalid("mmd bandwidth must be positive"));
            }
        }
        Ok(())
    }
}

/// Hinge triplet loss with the hardest in-batch negative in both directions.
/// `sim[i][j]` scores query `i` against gallery `j`; the diagonal holds the
/// positives and is excluded from the negatives.
pub fn triplet_hardest_node(g: &mut Graph, sim: NodeId, margin: f64) -> Result<NodeId> {
    let n = square_batch(g, sim, "triplet_hardest")?;
    let (pos_col, pos_row) = diagonal_both(g, sim, n)?;
    let blocked = g.constant(Matrix::from_fn(
        n,
        n,
        |i, j| if i == j { MASKED } else { 0.0 },
    ));
    let neg = g.add(sim, blocked)?;

    let row_max = g.max_axis(neg, Axis::Cols);
    let d = g.sub(row_max, pos_col)?;
    let d = g.offset(d, margin);
    let h1 = g.relu(d);

    let col_max = g.max_axis(neg, Axis::Rows);
    let d = g.sub(col_max, pos_row)?;
    let d = g.offset(d, margin);
    let h2 = g.relu(d);

    let s1 = g.sum(h1);
    let s2 = g.sum(h2);
    g.add(s1, s2)
}

/// Hinge triplet loss averaged over all negatives instead of the hardest;
/// used during the warm-up epochs.
pub fn triplet_mean_node(g: &mut Graph, sim: NodeId, margin: f64) -> Result<NodeId> {
    let n = square_batch(g, sim, "triplet_mean")?;
    let (pos_col, pos_row) = diagonal_both(g, sim, n)?;
    let ones_row = g.constant(Matrix::ones(1, n));
    let ones_col = g.constant(Matrix::ones(n, 1));
    let off_diag = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });

    let pos_rows = g.matmul(pos_col, ones_row)?; // pos_rows[i][j] = sim[i][i]
    let pos_cols = g.matmul(ones_col, pos_row)?; // pos_cols[i][j] = sim[j][j]
    let a = g.sub(sim, pos_rows)?;
    let a = g.offset(a, margin);
    let a = g.relu(a);
    let a = g.mask_mul(a, off_diag.clone())?;
    let b = g.sub(sim, pos_cols)?;
    let b = g.offset(b, margin);
    let b = g.relu(b);
    let b = g.mask_mul(b, off_diag)?;
    let s = g.add(a, b)?;
    let s = g.sum(s);
    Ok(g.scale(s, 1.0 / (n - 1) as f64))
}

fn square_batch(g: &Graph, sim: NodeId, op: &'static str) -> Result<usize> {
    let (r, c) = g.shape(sim);
    if r != c {
        return Err(Error::ShapeMismatch {
            op,
            left: (r, c),
            right: (r, r),
        });
    }
    if r < 2 {
        return Err(invalid(format!(
            "{op} needs a batch of at least 2, got {r}"
        )));
    }
    Ok(r)
}

/// Diagonal of a square node as an `N x 1` column and a `1 x N` row.
fn diagonal_both(g: &mut Graph, sim: NodeId, n: usize) -> Result<(NodeId, NodeId)> {
    let diag = g.mask_mul(sim, Matrix::identity(n))?;
    let col = g.sum_axis(diag, Axis::Cols);
    let row = g.sum_axis(diag, Axis::Rows);
    Ok((col, row))
}

/// Row indices `[0,0,..,0, 1,1,..,1, ...]`, each repeated `k` times.
fn repeat_index(n: usize, k: usize) -> Vec<usize> {
    (0..n * k).map(|r| r / k).collect()
}

/// `exp(s * (cos(set_{i,k}, global_i) - margin))` averaged over `i` and `k`,
/// for one modality.
pub fn global_discriminative_modality_node(
    g: &mut Graph,
    sets: NodeId,
    globals: NodeId,
    k: usize,
    margin: f64,
    scale: f64,
) -> Result<NodeId> {
    let (rows, d) = g.shape(sets);
    let (n, gd) = g.shape(globals);
    if gd != d || rows != n * k {
        return Err(Error::ShapeMismatch {
            op: "global_discriminative",
            left: (rows, d),
            right: (n, gd),
        });
    }
    let sn = g.l2_normalize_rows(sets);
    let gn = g.l2_normalize_rows(globals);
    let rep = g.gather_rows(gn, &repeat_index(n, k))?;
    let prod = g.mul(sn, rep)?;
    let cos = g.sum_axis(prod, Axis::Cols);
    let z = g.offset(cos, -margin);
    let z = g.scale(z, scale);
    let e = g.exp(z);
    Ok(g.mean(e))
}

/// Global discriminative loss over both modalities.
#[allow(clippy::too_many_arguments)]
pub fn global_discriminative_node(
    g: &mut Graph,
    image_sets: NodeId,
    image_globals: NodeId,
    text_sets: NodeId,
    text_globals: NodeId,
    k: usize,
    margin: f64,
    scale: f64,
) -> Result<NodeId> {
    let a = global_discriminative_modality_node(g, image_sets, image_globals, k, margin, scale)?;
    let b = global_discriminative_modality_node(g, text_sets, text_globals, k, margin, scale)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// Mask over an `(N*K) x (N*K)` Gram matrix selecting `(j, k)` with `j < k`
/// inside each diagonal `K x K` block.
fn intra_block_upper_mask(n: usize, k: usize) -> Matrix {
    Matrix::from_fn(n * k, n * k, |r, c| {
        if r / k == c / k && r % k < c % k {
            1.0
        } else {
            0.0
        }
    })
}

fn intra_block_mask(n: usize, k: usize) -> Matrix {
    Matrix::from_fn(n * k, n * k, |r, c| if r / k == c / k { 1.0 } else { 0.0 })
}

fn isd_pair_sum(g: &mut Graph, sets: NodeId, k: usize, margin: f64, scale: f64) -> Result<NodeId> {
    let n = g.shape(sets).0 / k;
    let sn = g.l2_normalize_rows(sets);
    let st = g.transpose(sn);
    let gram = g.matmul(sn, st)?;
    let z = g.offset(gram, -margin);
    let z = g.scale(z, scale);
    let e = g.exp(z);
    let e = g.mask_mul(e, intra_block_upper_mask(n, k))?;
    Ok(g.sum(e))
}

/// Intra-set divergence over both modalities, averaged over the batch.
pub fn intra_set_divergence_node(
    g: &mut Graph,
    image_sets: NodeId,
    text_sets: NodeId,
    k: usize,
    margin: f64,
    scale: f64,
) -> Result<NodeId> {
    if k < 2 {
        return Err(invalid(format!(
            "intra-set divergence needs K >= 2, got {k}"
        )));
    }
    let (ri, di) = g.shape(image_sets);
    let (rt, dt) = g.shape(text_sets);
    if ri != rt || ri % k != 0 {
        return Err(Error::ShapeMismatch {
            op: "intra_set_divergence",
            left: (ri, di),
            right: (rt, dt),
        });
    }
    let n = ri / k;
    let a = isd_pair_sum(g, image_sets, k, margin, scale)?;
    let b = isd_pair_sum(g, text_sets, k, margin, scale)?;
    let s = g.add(a, b)?;
    let pairs = (k * (k - 1)) as f64 / 2.0;
    Ok(g.scale(s, 1.0 / (pairs * n as f64)))
}

/// Mean over samples of `||E E^T - I||_F^2` with `E` the row-normalized
/// residual slots of each sample.
pub fn diversity_regularizer_node(g: &mut Graph, residual: NodeId, k: usize) -> Result<NodeId> {
    let rows = g.shape(residual).0;
    if k == 0 || rows % k != 0 {
        return Err(invalid(format!(
            "{rows} residual rows not divisible by K = {k}"
        )));
    }
    let n = rows / k;
    let en = g.l2_normalize_rows(residual);
    let et = g.transpose(en);
    let gram = g.matmul(en, et)?;
    let blocks = g.mask_mul(gram, intra_block_mask(n, k))?;
    let eye = g.constant(Matrix::identity(rows));
    let diff = g.sub(blocks, eye)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Median pairwise Euclidean distance of the pooled rows of `x` and `y`,
/// falling back to 1 when every point coincides.
pub fn median_heuristic(x: &Matrix, y: &Matrix) -> f64 {
    let pooled: Vec<&[f64]> = x.iter_rows().chain(y.iter_rows()).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len() / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            let s: f64 = pooled[i]
                .iter()
                .zip(pooled[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.push(s.sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn gaussian_kernel_mean(g: &mut Graph, a: NodeId, b: NodeId, h: f64) -> Result<NodeId> {
    let (na, nb) = (g.shape(a).0, g.shape(b).0);
    let aa = g.mul(a, a)?;
    let aa = g.sum_axis(aa, Axis::Cols);
    let bb = g.mul(b, b)?;
    let bb = g.sum_axis(bb, Axis::Cols);
    let bbt = g.transpose(bb);
    let ones_b = g.constant(Matrix::ones(1, nb));
    let ones_a = g.constant(Matrix::ones(na, 1));
    let ta = g.matmul(aa, ones_b)?;
    let tb = g.matmul(ones_a, bbt)?;
    let btr = g.transpose(b);
    let ab = g.matmul(a, btr)?;
    let ab2 = g.scale(ab, 2.0);
    let d2 = g.add(ta, tb)?;
    let d2 = g.sub(d2, ab2)?;
    let z = g.scale(d2, -1.0 / (2.0 * h * h));
    let k = g.exp(z);
    Ok(g.mean(k))
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel.
pub fn mmd_gaussian_node(
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
    bandwidth: Bandwidth,
) -> Result<NodeId> {
    let (xs, ys) = (g.shape(x), g.shape(y));
    if xs.0 == 0 || ys.0 == 0 {
        return Err(invalid("mmd needs nonempty samples"));
    }
    if xs.1 != ys.1 {
        return Err(Error::ShapeMismatch {
            op: "mmd_gaussian",
            left: xs,
            right: ys,
        });
    }
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) => return Err(invalid(format!("bandwidth must be positive, got {h}"))),
        Bandwidth::MedianHeuristic => median_heuristic(g.value(x), g.value(y)),
    };
    let kxx = gaussian_kernel_mean(g, x, x, h)?;
    let kyy = gaussian_kernel_mean(g, y, y, h)?;
    let kxy = gaussian_kernel_mean(g, x, y, h)?;
    let kxy2 = g.scale(kxy, 2.0);
    let s = g.add(kxx, kyy)?;
    g.sub(s, kxy2)
}

/// Symmetric InfoNCE over a square score matrix with temperature `tau`.
pub fn contrastive_infonce_node(g: &mut Graph, sim: NodeId, tau: f64) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    let (r, c) = g.shape(sim);
    if r != c || r == 0 {
        return Err(Error::ShapeMismatch {
            op: "contrastive_infonce",
            left: (r, c),
            right: (r, r),
        });
    }
    let logits = g.scale(sim, 1.0 / tau);
    let p_row = g.softmax_rows(logits);
    let lt = g.transpose(logits);
    let p_col = g.softmax_rows(lt);
    let eye = Matrix::identity(r);
    // Only diagonal probabilities enter the log; mask before it so
    // off-diagonal underflow cannot hit the log domain check.
    let d_row = g.mask_mul(p_row, eye.clone())?;
    let d_row = g.sum_axis(d_row, Axis::Cols);
    let d_col = g.mask_mul(p_col, eye)?;
    let d_col = g.sum_axis(d_col, Axis::Cols);
    let l_row = g.log(d_row)?;
    let l_col = g.log(d_col)?;
    let s = g.add(l_row, l_col)?;
    let s = g.sum(s);
    Ok(g.scale(s, -1.0 / (2.0 * r as f64)))
}

/// One batch of embeddings as graph nodes. Every `*_sets` and `*_residual`
/// node is an `(N*K) x D` stack; globals are `N x D`. Row `i` of the image
/// side pairs with row `i` of the text side.
#[derive(Clone, Copy, Debug)]
pub struct BatchNodes {
    pub k: usize,
    pub image_sets: NodeId,
    pub text_sets: NodeId,
    pub image_globals: NodeId,
    pub text_globals: NodeId,
    pub image_residual: NodeId,
    pub text_residual: NodeId,
}

/// Plain-value batch of embeddings, see [`BatchNodes`].
#[derive(Clone, Debug)]
pub struct BatchEmbeddings {
    pub image_sets: Vec<EmbeddingSet>,
    pub text_sets: Vec<EmbeddingSet>,
    pub image_globals: Matrix,
    pub text_globals: Matrix,
    pub image_residual: Vec<Matrix>,
    pub text_residual: Vec<Matrix>,
}

fn stack_rows(parts: &[&Matrix]) -> Result<Matrix> {
    let cols = parts.first().ok_or_else(|| invalid("empty batch"))?.cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(invalid("inconsistent embedding dimension in batch"));
        }
        rows += p.rows();
        data.extend_from_slice(p.as_slice());
    }
    Matrix::from_vec(rows, cols, data)
}

impl BatchEmbeddings {
    pub fn len(&self) -> usize {
        self.image_sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_sets.is_empty()
    }

    /// Loads the batch into `g` as constants.
    pub fn to_nodes(&self, g: &mut Graph) -> Result<BatchNodes> {
        let n = self.len();
        if self.text_sets.len() != n
            || self.image_globals.rows() != n
            || self.text_globals.rows() != n
            || self.image_residual.len() != n
            || self.text_residual.len() != n
        {
            return Err(invalid("batch components disagree on N"));
        }
        let k = self
            .image_sets
            .first()
            .ok_or_else(|| invalid("empty batch"))?
            .k();
        let img: Vec<&Matrix> = self.image_sets.iter().map(|s| s.elements()).collect();
        let txt: Vec<&Matrix> = self.text_sets.iter().map(|s| s.elements()).collect();
        let ir: Vec<&Matrix> = self.image_residual.iter().collect();
        let tr: Vec<&Matrix> = self.text_residual.iter().collect();
        Ok(BatchNodes {
            k,
            image_sets: g.constant(stack_rows(&img)?),
            text_sets: g.constant(stack_rows(&txt)?),
            image_globals: g.constant(self.image_globals.clone()),
            text_globals: g.constant(self.text_globals.clone()),
            image_residual: g.constant(stack_rows(&ir)?),
            text_residual: g.constant(stack_rows(&tr)?),
        })
    }
}

/// Unweighted value of every term; `None` for disabled terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub triplet: f64,
    pub gd: Option<f64>,
    pub isd: Option<f64>,
    pub mmd: Option<f64>,
    pub div: Option<f64>,
    pub con: Option<f64>,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        let terms = [
            ("triplet", Some(self.triplet)),
            ("gd", self.gd),
            ("isd", self.isd),
            ("mmd", self.mmd),
            ("div", self.div),
            ("con", self.con),
            ("total", Some(self.total)),
        ];
        terms
            .into_iter()
            .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
            .map(|(name, _)| name)
    }
}

/// Which triplet form to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletMining {
    Hardest,
    MeanNegatives,
}

/// Weighted sum of all enabled terms. Terms with a zero weight are not
/// built.
pub fn combined_loss_node(
    g: &mut Graph,
    batch: &BatchNodes,
    cfg: &LossConfig,
    kind: SimilarityKind,
    mining: TripletMining,
) -> Result<(NodeId, LossBreakdown)> {
    cfg.validate()?;
    let k = batch.k;
    let sim = batch_similarity_node(g, batch.image_sets, batch.text_sets, k, kind)?;
    let tri = match mining {
        TripletMining::Hardest => triplet_hardest_node(g, sim, cfg.triplet_margin)?,
        TripletMining::MeanNegatives => triplet_mean_node(g, sim, cfg.triplet_margin)?,
    };
    let mut breakdown = LossBreakdown {
        triplet: g.value(tri).item(),
        ..LossBreakdown::default()
    };
    let mut total = tri;

    let mut add_term = |g: &mut Graph, weight: f64, term: NodeId| -> Result<f64> {
        let w = g.scale(term, weight);
        total = g.add(total, w)?;
        Ok(g.value(term).item())
    };

    if cfg.lambda_gd > 0.0 {
        let t = global_discriminative_node(
            g,
            batch.image_sets,
            batch.image_globals,
            batch.text_sets,
            batch.text_globals,
            k,
            cfg.gd_margin,
            cfg.exp_scale,
        )?;
        breakdown.gd = Some(add_term(g, cfg.lambda_gd, t)?);
    }
    if cfg.lambda_isd > 0.0 {
        let t = intra_set_divergence_node(
            g,
            batch.image_sets,
            batch.text_sets,
            k,
            cfg.isd_margin,
            cfg.exp_scale,
        )?;
        breakdown.isd = Some(add_term(g, cfg.lambda_isd, t)?);
    }
    if cfg.lambda_mmd > 0.0 {
        let t = mmd_gaussian_node(g, batch.image_sets, batch.text_sets, cfg.mmd_bandwidth)?;
        breakdown.mmd = Some(add_term(g, cfg.lambda_mmd, t)?);
    }
    if cfg.lambda_div > 0.0 {
        let a = diversity_regularizer_node(g, batch.image_residual, k)?;
        let b = diversity_regularizer_node(g, batch.text_residual, k)?;
        let s = g.add(a, b)?;
        let t = g.scale(s, 0.5);
        breakdown.div = Some(add_term(g, cfg.lambda_div, t)?);
    }
    if cfg.lambda_con > 0.0 {
        let t = contrastive_infonce_node(g, sim, cfg.temperature)?;
        breakdown.con = Some(add_term(g, cfg.lambda_con, t)?);
    }
    breakdown.total = g.value(total).item();
    Ok((total, breakdown))
}

// ---------------------------------------------------------------------------
// Plain-value wrappers
// ---------------------------------------------------------------------------

fn stacked(sets: &[EmbeddingSet]) -> Result<(Matrix, usize)> {
    let k = sets
        .first()
        .ok_or_else(|| invalid("empty set collection"))?
        .k();
    if sets.iter().any(|s| s.k() != k) {
        return Err(invalid("heterogeneous set sizes"));
    }
    let parts: Vec<&Matrix> = sets.iter().map(|s| s.elements()).collect();
    Ok((stack_rows(&parts)?, k))
}

pub fn triplet_hardest(sim: &Matrix, margin: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(sim.clone());
    let l = triplet_hardest_node(&mut g, s, margin)?;
    Ok(g.value(l).item())
}

/// Per-modality pairs of `(sets, globals)`; the loss averages the modalities.
pub fn global_discriminative(
    modalities: &[(&[EmbeddingSet], &Matrix)],
    margin: f64,
    scale: f64,
) -> Result<f64> {
    if modalities.is_empty() {
        return Err(invalid("no modalities"));
    }
    let mut g = Graph::new();
    let mut terms = Vec::new();
    for (sets, globals) in modalities {
        let (m, k) = stacked(sets)?;
        let s = g.constant(m);
        let gl = g.constant((*globals).clone());
        terms.push(global_discriminative_modality_node(
            &mut g, s, gl, k, margin, scale,
        )?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    let out = g.scale(acc, 1.0 / terms.len() as f64);
    Ok(g.value(out).item())
}

pub fn intra_set_divergence(
    image_sets: &[EmbeddingSet],
    text_sets: &[EmbeddingSet],
    margin: f64,
    scale: f64,
) -> Result<f64> {
    let (a, k) = stacked(image_sets)?;
    let (b, _) = stacked(text_sets)?;
    let mut g = Graph::new();
    let (a, b) = (g.constant(a), g.constant(b));
    let l = intra_set_divergence_node(&mut g, a, b, k, margin, scale)?;
    Ok(g.value(l).item())
}

pub fn diversity_regularizer(residual: &[Matrix]) -> Result<f64> {
    let k = residual
        .first()
        .ok_or_else(|| invalid("empty residual batch"))?
        .rows();
    let parts: Vec<&Matrix> = residual.iter().collect();
    let mut g = Graph::new();
    let r = g.constant(stack_rows(&parts)?);
    let l = diversity_regularizer_node(&mut g, r, k)?;
    Ok(g.value(l).item())
}

pub fn mmd_gaussian(x: &Matrix, y: &Matrix, bandwidth: Bandwidth) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(x.clone()), g.constant(y.clone()));
    let l = mmd_gaussian_node(&mut g, a, b, bandwidth)?;
    Ok(g.value(l).item())
}

pub fn contrastive_infonce(sim: &Matrix, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(sim.clone());
    let l = contrastive_infonce_node(&mut g, s, tau)?;
    Ok(g.value(l).item())
}

pub fn combined_loss(
    batch: &BatchEmbeddings,
    cfg: &LossConfig,
    kind: SimilarityKind,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let nodes = batch.to_nodes(&mut g)?;
    let (_, breakdown) = combined_loss_node(&mut g, &nodes, cfg, kind, TripletMining::Hardest)?;
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_examples() {
        let sim = Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.8]]);
        assert_eq!(triplet_hardest(&sim, 0.2).unwrap(), 0.0);
        let sim = Matrix::from_rows(&[[0.5, 0.6], [0.4, 0.7]]);
        assert!((triplet_hardest(&sim, 0.2).unwrap() - 0.5).abs() < 1e-15);
        let sim = Matrix::from_rows(&[[0.9, 0.3, 0.1], [0.2, 0.8, 0.4], [0.0, 0.5, 0.7]]);
        assert_eq!(triplet_hardest(&sim, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn triplet_needs_negatives() {
        assert!(triplet_hardest(&Matrix::scalar(1.0), 0.2).is_err());
    }

    #[test]
    fn triplet_mean_on_hand_example() {
        // Row 0: [0.2 + 0.6 - 0.5]+ = 0.3; row 1: [0.2 + 0.4 - 0.7]+ = 0.
        // Col 0: [0.2 + 0.4 - 0.5]+ = 0.1; col 1: [0.2 + 0.6 - 0.7]+ = 0.1.
        let mut g = Graph::new();
        let s = g.constant(Matrix::from_rows(&[[0.5, 0.6], [0.4, 0.7]]));
        let l = triplet_mean_node(&mut g, s, 0.2).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gd_single_term() {
        // cos = 1, margin 0.6, scale 0.5 -> exp(0.2).
        let sets = vec![EmbeddingSet::new(Matrix::from_rows(&[[1.0, 0.0]])).unwrap()];
        let globals = Matrix::from_rows(&[[2.0, 0.0]]);
        let v = global_discriminative(&[(&sets, &globals)], 0.6, 0.5).unwrap();
        assert!((v - 0.2f64.exp()).abs() < 1e-15);
        assert!((v - 1.2214).abs() < 1e-4);
    }

    #[test]
    fn gd_at_margin_is_one() {
        let c = 0.3f64;
        let s = (1.0 - c * c).sqrt();
        let sets = vec![EmbeddingSet::new(Matrix::from_rows(&[[c, s], [c, -s]])).unwrap()];
        let globals = Matrix::from_rows(&[[1.0, 0.0]]);
        let v = global_discriminative(&[(&sets, &globals), (&sets, &globals)], c, 0.7).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn isd_examples() {
        let c = 0.25f64;
        let s = (1.0 - c * c).sqrt();
        let set = EmbeddingSet::new(Matrix::from_rows(&[[1.0, 0.0], [c, s]])).unwrap();
        let v = intra_set_divergence(&[set.clone()], &[set], c, 0.5).unwrap();
        assert!((v - 2.0).abs() < 1e-12);

        let eye = EmbeddingSet::new(Matrix::identity(4)).unwrap();
        let v = intra_set_divergence(&[eye.clone()], &[eye], 0.0, 1.0).unwrap();
        assert!((v - 2.0).abs() < 1e-15);
    }

    #[test]
    fn isd_needs_two_elements() {
        let s = EmbeddingSet::new(Matrix::from_rows(&[[1.0, 0.0]])).unwrap();
        assert!(intra_set_divergence(&[s.clone()], &[s], 0.5, 0.5).is_err());
    }

    #[test]
    fn diversity_examples() {
        assert!(diversity_regularizer(&[Matrix::identity(3)]).unwrap().abs() < 1e-15);
        let same = Matrix::from_rows(&[[0.0, 1.0], [0.0, 1.0]]);
        assert!((diversity_regularizer(&[same]).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn mmd_examples() {
        let x = Matrix::from_rows(&[[0.1, 0.2], [0.5, -0.3], [1.0, 0.0]]);
        assert!(
            mmd_gaussian(&x, &x, Bandwidth::MedianHeuristic)
                .unwrap()
                .abs()
                < 1e-12
        );
        let a = Matrix::from_rows(&[[0.0, 0.0]]);
        let b = Matrix::from_rows(&[[3.0, 4.0]]);
        let h = 2.0;
        let expected = 2.0 - 2.0 * (-25.0f64 / (2.0 * h * h)).exp();
        assert!((mmd_gaussian(&a, &b, Bandwidth::Fixed(h)).unwrap() - expected).abs() < 1e-12);
        assert!(mmd_gaussian(&Matrix::zeros(0, 2), &b, Bandwidth::Fixed(1.0)).is_err());
    }

    #[test]
    fn infonce_examples() {
        assert_eq!(contrastive_infonce(&Matrix::scalar(0.3), 0.1).unwrap(), 0.0);
        for n in [2, 4, 7] {
            let v = contrastive_infonce(&Matrix::filled(n, n, 0.4), 0.05).unwrap();
            assert!((v - (n as f64).ln()).abs() < 1e-12);
        }
        let sim = Matrix::identity(4).map(|v| v * 1.0);
        let v = contrastive_infonce(&sim, 0.05).unwrap();
        assert!(v < 1e-7, "{v}");
        assert!(contrastive_infonce(&sim, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            triplet_margin: 1.5,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            lambda_mmd: -0.1,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
