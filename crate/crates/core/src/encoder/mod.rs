//! Toy-scale set prediction.
//!
//! Per modality: a residual two-layer MLP projects raw local features
//! ([`SetEncoder::toy_encode`]), a pooled global feature is taken from the
//! projected rows, and `K` learned slot queries cross-attend over the locals
//! through `L` aggregation blocks. The final slots are layer-normed into the
//! residual set, the layer-normed global is added to every slot, and the
//! rows are L2-normalized.
//!
//! All functions work on batches: the locals of `N` samples are stacked and
//! attention is restricted to each sample's own rows by an additive mask.

mod checkpoint;

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};

use crate::error::{invalid, Error, Result};
use crate::numgrad::{Axis, Graph, Matrix, NodeId};
use crate::simset::EmbeddingSet;

/// Additive attention bias for keys outside a slot's own sample.
const ATTN_BLOCKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Image, Modality::Text];

    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }

    /// Image globals are mean-pooled, text globals max-pooled.
    pub fn pooling(self) -> Pooling {
        match self {
            Modality::Image => Pooling::Mean,
            Modality::Text => Pooling::Max,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Set size.
    pub k: usize,
    /// Embedding width.
    pub d: usize,
    /// Width of the raw local features.
    pub d_raw: usize,
    /// Number of aggregation blocks.
    pub blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            k: 4,
            d: 32,
            d_raw: 32,
            blocks: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 || self.d_raw == 0 || self.blocks == 0 {
            return Err(invalid(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Named parameter arrays, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Matrix>,
}

impl Params {
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.map
            .get(name)
            .ok_or_else(|| invalid(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Matrix::zeros(v.rows(), v.cols())))
                .collect(),
        }
    }
}

/// Parameters loaded into a graph.
#[derive(Clone, Debug, Default)]
pub struct ParamNodes {
    map: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    /// Pairs parameter names with already created leaves.
    pub fn from_named<I: IntoIterator<Item = (String, NodeId)>>(pairs: I) -> Self {
        Self {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("missing parameter node {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.map.iter()
    }
}

/// Node handles of one aggregation block.
#[derive(Clone, Copy, Debug)]
pub struct BlockNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

/// Node handles of one modality's parameters.
#[derive(Clone, Debug)]
pub struct ModalityNodes {
    pub proj_in: NodeId,
    pub proj_w1: NodeId,
    pub proj_b1: NodeId,
    pub proj_w2: NodeId,
    pub proj_b2: NodeId,
    pub slots: NodeId,
    pub blocks: Vec<BlockNodes>,
    pub ln_slot_gain: NodeId,
    pub ln_slot_bias: NodeId,
    pub ln_global_gain: NodeId,
    pub ln_global_bias: NodeId,
}

impl ModalityNodes {
    pub fn from_params(nodes: &ParamNodes, modality: Modality, blocks: usize) -> Result<Self> {
        let p = modality.prefix();
        let n = |s: &str| nodes.get(&format!("{p}.{s}"));
        let blocks = (0..blocks)
            .map(|l| {
                let b = |s: &str| nodes.get(&format!("{p}.block{l}.{s}"));
                Ok(BlockNodes {
                    wq: b("wq")?,
                    wk: b("wk")?,
                    wv: b("wv")?,
                    mlp_w1: b("mlp_w1")?,
                    mlp_b1: b("mlp_b1")?,
                    mlp_w2: b("mlp_w2")?,
                    mlp_b2: b("mlp_b2")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            proj_in: n("proj.w_in")?,
            proj_w1: n("proj.w1")?,
            proj_b1: n("proj.b1")?,
            proj_w2: n("proj.w2")?,
            proj_b2: n("proj.b2")?,
            slots: n("slots")?,
            blocks,
            ln_slot_gain: n("ln_slot.gain")?,
            ln_slot_bias: n("ln_slot.bias")?,
            ln_global_gain: n("ln_global.gain")?,
            ln_global_bias: n("ln_global.bias")?,
        })
    }
}

/// Projected local features and pooled globals for a batch of samples.
#[derive(Clone, Debug)]
pub struct BundleNodes {
    /// All samples' projected locals, stacked.
    pub local: NodeId,
    /// `(start, len)` row range of each sample within `local`.
    pub segments: Vec<(usize, usize)>,
    /// `N x D` pooled globals.
    pub global: NodeId,
}

/// One sample's features after projection.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub local: Matrix,
    /// `1 x D`.
    pub global: Matrix,
}

/// Encoder output for a batch, as stacks of `N` sets.
#[derive(Clone, Copy, Debug)]
pub struct EncodedNodes {
    pub n: usize,
    /// `(N*K) x D`, unit rows.
    pub sets: NodeId,
    /// `(N*K) x D` layer-normed slots before the global is added.
    pub residual: NodeId,
    /// `N x D` pooled globals.
    pub globals: NodeId,
}

/// Plain-value encoder output for one sample.
#[derive(Clone, Debug)]
pub struct EncodedSample {
    pub set: EmbeddingSet,
    pub residual: Matrix,
    pub global: Matrix,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

/// Residual two-layer MLP applied row-wise: `x + relu(x W1 + b1) W2 + b2`.
fn residual_mlp(
    g: &mut Graph,
    x: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
) -> Result<NodeId> {
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let h = g.matmul(h, w2)?;
    let h = g.add_row(h, b2)?;
    g.add(h, x)
}

/// Projects raw locals of every sample and pools each sample's global.
pub fn toy_encode_nodes(
    g: &mut Graph,
    m: &ModalityNodes,
    pooling: Pooling,
    raws: &[&Matrix],
) -> Result<BundleNodes> {
    if raws.is_empty() {
        return Err(invalid("empty sample batch"));
    }
    let d_raw = g.shape(m.proj_in).0;
    let mut segments = Vec::with_capacity(raws.len());
    let mut data = Vec::new();
    let mut start = 0;
    for raw in raws {
        if raw.rows() == 0 {
            return Err(invalid("sample with no local features"));
        }
        if raw.cols() != d_raw {
            return Err(Error::ShapeMismatch {
                op: "toy_encode",
                left: raw.shape(),
                right: (raw.rows(), d_raw),
            });
        }
        segments.push((start, raw.rows()));
        start += raw.rows();
        data.extend_from_slice(raw.as_slice());
    }
    let x = g.constant(Matrix::from_vec(start, d_raw, data)?);
    let x = g.matmul(x, m.proj_in)?;
    let local = residual_mlp(g, x, m.proj_w1, m.proj_b1, m.proj_w2, m.proj_b2)?;

    let global = match pooling {
        Pooling::Mean => {
            let pool = Matrix::from_fn(raws.len(), start, |i, r| {
                let (s, l) = segments[i];
                if r >= s && r < s + l {
                    1.0 / l as f64
                } else {
                    0.0
                }
            });
            let pool = g.constant(pool);
            g.matmul(pool, local)?
        }
        Pooling::Max => {
            let rows = segments
                .iter()
                .map(|&(s, l)| {
                    let idx: Vec<usize> = (s..s + l).collect();
                    let seg = g.gather_rows(local, &idx)?;
                    Ok(g.max_axis(seg, Axis::Rows))
                })
                .collect::<Result<Vec<_>>>()?;
            g.concat_rows(&rows)?
        }
    };
    Ok(BundleNodes {
        local,
        segments,
        global,
    })
}

/// Additive mask letting slot rows of sample `i` see only sample `i`'s keys.
fn attention_mask(segments: &[(usize, usize)], k: usize) -> Matrix {
    let total: usize = segments.iter().map(|s| s.1).sum();
    Matrix::from_fn(segments.len() * k, total, |r, c| {
        let (s, l) = segments[r / k];
        if c >= s && c < s + l {
            0.0
        } else {
            ATTN_BLOCKED
        }
    })
}

/// Layer norm without gain or bias.
fn plain_layer_norm(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let c = g.shape(x).1;
    let gain = g.constant(Matrix::ones(1, c));
    let bias = g.constant(Matrix::zeros(1, c));
    g.layer_norm_rows(x, gain, bias)
}

/// One aggregation block: slots cross-attend over their sample's locals
/// (softmax over keys), then a residual MLP. Attention logits compare
/// layer-normed queries and keys; values use the raw locals.
///
/// `mask` is `None` for a single sample, or the additive per-sample mask
/// over the stacked locals.
pub fn agg_block(
    g: &mut Graph,
    e_prev: NodeId,
    local: NodeId,
    block: &BlockNodes,
    mask: Option<&Matrix>,
) -> Result<NodeId> {
    let d = g.shape(block.wq).1;
    let qn = plain_layer_norm(g, e_prev)?;
    let kn = plain_layer_norm(g, local)?;
    let q = g.matmul(qn, block.wq)?;
    let keys = g.matmul(kn, block.wk)?;
    let values = g.matmul(local, block.wv)?;
    let kt = g.transpose(keys);
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let logits = match mask {
        Some(m) => {
            let mn = g.constant(m.clone());
            g.add(logits, mn)?
        }
        None => logits,
    };
    let attn = g.softmax_rows(logits);
    let pooled = g.matmul(attn, values)?;
    residual_mlp(
        g,
        pooled,
        block.mlp_w1,
        block.mlp_b1,
        block.mlp_w2,
        block.mlp_b2,
    )
}

/// Runs the slot blocks over a batch and assembles the output sets.
pub fn set_predict_nodes(
    g: &mut Graph,
    m: &ModalityNodes,
    bundle: &BundleNodes,
) -> Result<EncodedNodes> {
    let n = bundle.segments.len();
    let k = g.shape(m.slots).0;
    let idx: Vec<usize> = (0..n * k).map(|r| r % k).collect();
    let mut e = g.gather_rows(m.slots, &idx)?;
    let mask = if n > 1 {
        Some(attention_mask(&bundle.segments, k))
    } else {
        None
    };
    for block in &m.blocks {
        e = agg_block(g, e, bundle.local, block, mask.as_ref())?;
    }
    let residual = g.layer_norm_rows(e, m.ln_slot_gain, m.ln_slot_bias)?;
    let glob = g.layer_norm_rows(bundle.global, m.ln_global_gain, m.ln_global_bias)?;
    let rep: Vec<usize> = (0..n * k).map(|r| r / k).collect();
    let glob_rep = g.gather_rows(glob, &rep)?;
    let fused = g.add(residual, glob_rep)?;
    let sets = g.l2_normalize_rows(fused);
    Ok(EncodedNodes {
        n,
        sets,
        residual,
        globals: bundle.global,
    })
}

/// Parameters and configuration of both modality encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct SetEncoder {
    pub config: EncoderConfig,
    pub params: Params,
}

impl SetEncoder {
    /// Seeded initialization: uniform Glorot for queries and projections,
    /// zero second MLP layers, identity input projection when the raw and
    /// embedding widths agree, unit layer-norm gains.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, d, d_raw) = (config.k, config.d, config.d_raw);
        let mut params = Params::default();
        for modality in Modality::BOTH {
            let p = modality.prefix();
            let w_in = if d_raw == d {
                Matrix::identity(d)
            } else {
                xavier(&mut rng, d_raw, d)
            };
            params.insert(format!("{p}.proj.w_in"), w_in);
            params.insert(format!("{p}.proj.w1"), xavier(&mut rng, d, d));
            params.insert(format!("{p}.proj.b1"), Matrix::zeros(1, d));
            params.insert(format!("{p}.proj.w2"), Matrix::zeros(d, d));
            params.insert(format!("{p}.proj.b2"), Matrix::zeros(1, d));
            params.insert(format!("{p}.slots"), xavier(&mut rng, k, d));
            for l in 0..config.blocks {
                let b = format!("{p}.block{l}");
                params.insert(format!("{b}.wq"), xavier(&mut rng, d, d));
                params.insert(format!("{b}.wk"), xavier(&mut rng, d, d));
                params.insert(format!("{b}.wv"), xavier(&mut rng, d, d));
                params.insert(format!("{b}.mlp_w1"), xavier(&mut rng, d, d));
                params.insert(format!("{b}.mlp_b1"), Matrix::zeros(1, d));
                params.insert(format!("{b}.mlp_w2"), Matrix::zeros(d, d));
                params.insert(format!("{b}.mlp_b2"), Matrix::zeros(1, d));
            }
            params.insert(format!("{p}.ln_slot.gain"), Matrix::ones(1, d));
            params.insert(format!("{p}.ln_slot.bias"), Matrix::zeros(1, d));
            params.insert(format!("{p}.ln_global.gain"), Matrix::ones(1, d));
            params.insert(format!("{p}.ln_global.bias"), Matrix::zeros(1, d));
        }
        Ok(Self { config, params })
    }

    /// Loads every parameter as a trainable leaf.
    pub fn load_params(&self, g: &mut Graph) -> ParamNodes {
        ParamNodes {
            map: self
                .params
                .iter()
                .map(|(name, m)| (name.clone(), g.param(m.clone())))
                .collect(),
        }
    }

    /// Loads every parameter as a constant (evaluation).
    pub fn load_constants(&self, g: &mut Graph) -> ParamNodes {
        ParamNodes {
            map: self
                .params
                .iter()
                .map(|(name, m)| (name.clone(), g.constant(m.clone())))
                .collect(),
        }
    }

    pub fn modality_nodes(&self, nodes: &ParamNodes, modality: Modality) -> Result<ModalityNodes> {
        ModalityNodes::from_params(nodes, modality, self.config.blocks)
    }

    /// Full forward pass for a batch of raw samples of one modality.
    pub fn encode_nodes(
        &self,
        g: &mut Graph,
        nodes: &ParamNodes,
        modality: Modality,
        raws: &[&Matrix],
    ) -> Result<EncodedNodes> {
        let m = self.modality_nodes(nodes, modality)?;
        let bundle = toy_encode_nodes(g, &m, modality.pooling(), raws)?;
        set_predict_nodes(g, &m, &bundle)
    }

    /// Plain-value forward pass, processed in chunks of `chunk` samples.
    pub fn encode(&self, modality: Modality, raws: &[&Matrix]) -> Result<Vec<EncodedSample>> {
        const CHUNK: usize = 64;
        let (k, d) = (self.config.k, self.config.d);
        let mut out = Vec::with_capacity(raws.len());
        for chunk in raws.chunks(CHUNK) {
            let mut g = Graph::new();
            let nodes = self.load_constants(&mut g);
            let enc = self.encode_nodes(&mut g, &nodes, modality, chunk)?;
            let (sets, res, glob) = (
                g.value(enc.sets),
                g.value(enc.residual),
                g.value(enc.globals),
            );
            for i in 0..enc.n {
                out.push(EncodedSample {
                    set: EmbeddingSet::new(sets.block(i * k, 0, k, d))?,
                    residual: res.block(i * k, 0, k, d),
                    global: glob.block(i, 0, 1, d),
                });
            }
        }
        Ok(out)
    }

    /// Projected locals and pooled global of one raw sample.
    pub fn toy_encode(&self, modality: Modality, raw: &Matrix) -> Result<FeatureBundle> {
        let mut g = Graph::new();
        let nodes = self.load_constants(&mut g);
        let m = self.modality_nodes(&nodes, modality)?;
        let b = toy_encode_nodes(&mut g, &m, modality.pooling(), &[raw])?;
        Ok(FeatureBundle {
            local: g.value(b.local).clone(),
            global: g.value(b.global).clone(),
        })
    }

    /// Output set and residual slots for an already projected bundle.
    pub fn set_predict(
        &self,
        modality: Modality,
        bundle: &FeatureBundle,
    ) -> Result<(EmbeddingSet, Matrix)> {
        let mut g = Graph::new();
        let nodes = self.load_constants(&mut g);
        let m = self.modality_nodes(&nodes, modality)?;
        let b = BundleNodes {
            local: g.constant(bundle.local.clone()),
            segments: vec![(0, bundle.local.rows())],
            global: g.constant(bundle.global.clone()),
        };
        let enc = set_predict_nodes(&mut g, &m, &b)?;
        Ok((
            EmbeddingSet::new(g.value(enc.sets).clone())?,
            g.value(enc.residual).clone(),
        ))
    }
}
