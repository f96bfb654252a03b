//! BERT-shaped encoder: token (+ optionally factorized) embedding with learned
//! positions, `L` post-norm transformer layers with ReLU FFNs, and a linear
//! classifier over the first position.

mod config;
mod params;

pub use config::{count_params, ModelConfig};
pub use params::{LayerParams, Norm, ParamStore, Params, TokenEmbedding};

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{AttentionLayout, Graph, Tensor, Var};

/// Token id used for padding.
pub const PAD_ID: usize = 0;

/// A padded batch of token sequences, example-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `batch·seq` token ids.
    pub ids: Vec<usize>,
    /// `true` at real (non-padding) positions.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Pads each sequence with [`PAD_ID`] to the longest length present.
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let seq = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seq == 0 || seqs.iter().any(|s| s.as_ref().is_empty()) {
            return Err(Error::input("every sequence needs at least one token"));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut mask = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(PAD_ID).take(seq - s.len()));
            mask.extend(std::iter::repeat(true).take(s.len()));
            mask.extend(std::iter::repeat(false).take(seq - s.len()));
        }
        Ok(Self {
            ids,
            mask,
            batch: seqs.len(),
            seq,
        })
    }

    /// Row index of each example's first ([CLS]) position.
    pub fn first_positions(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq).collect()
    }
}

/// Runtime switches for a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Dropout rate after attention and FFN outputs; 0 disables it.
    pub dropout: f64,
    pub seed: u64,
    pub step: u64,
}

/// Handles produced by one forward pass.
///
/// Hidden states are stored flattened as `(batch·seq) × hidden` matrices,
/// example-major; `hidden[0]` is the embedding output.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    pub hidden: Vec<Var>,
    pub batch: usize,
    pub seq: usize,
    pub row_mask: Vec<bool>,
}

/// Concrete values of a [`ForwardTrace`], detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceValues {
    pub logits: Tensor,
    pub hidden: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Singular values of the embedding factors while they are exactly the
    /// SVD factors; cleared once any optimizer update touches the model.
    pub singular_values: Option<Vec<f64>>,
}

impl Model {
    pub fn new(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Self {
            config,
            params,
            singular_values: None,
        })
    }

    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = ParamStore::init(&config, 0.02, rng)?;
        Self::new(config, params)
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn check_invariants(&self) -> Result<()> {
        self.config.validate()?;
        self.params.check_shapes(&self.config)
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Params<Var> {
        self.params.map(|_, t| g.leaf(t.clone(), trainable))
    }

    pub fn forward(&self, g: &mut Graph, bound: &Params<Var>, batch: &Batch, opts: ForwardOptions) -> Result<ForwardTrace> {
        forward(g, &self.config, bound, batch, opts)
    }

    /// Forward pass without gradients, returning logits and hidden states.
    pub fn trace_values(&self, batch: &Batch) -> Result<TraceValues> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let trace = self.forward(&mut g, &bound, batch, ForwardOptions::default())?;
        Ok(TraceValues {
            logits: g.value(trace.logits).clone(),
            hidden: trace.hidden.iter().map(|&h| g.value(h).clone()).collect(),
        })
    }

    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        Ok(self.trace_values(batch)?.logits)
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    /// Rounds all parameters to single precision (checkpoint precision).
    pub fn round_to_f32(&mut self) {
        self.params.visit_mut(|_, t| t.round_to_f32());
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Embedding output `LN(token_embedding[id] + position[pos])` for every
/// position of the batch.
pub fn embed(g: &mut Graph, config: &ModelConfig, p: &Params<Var>, batch: &Batch) -> Result<Var> {
    if let Some(&bad) = batch.ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(Error::input(format!("token id {bad} out of range for vocabulary of {}", config.vocab_size)));
    }
    if batch.seq > config.max_len {
        return Err(Error::input(format!(
            "sequence length {} exceeds max_len {}",
            batch.seq, config.max_len
        )));
    }
    let tokens = match &p.embedding {
        TokenEmbedding::Dense(table) => g.gather_rows(*table, &batch.ids)?,
        TokenEmbedding::Factorized { u, v } => {
            let rows = g.gather_rows(*u, &batch.ids)?;
            g.matmul(rows, *v)?
        }
    };
    let pos_ids: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
    let pos = g.gather_rows(p.position, &pos_ids)?;
    let sum = g.add(tokens, pos)?;
    g.layer_norm(sum, p.embed_norm.gamma, p.embed_norm.beta, config.eps)
}

/// One attention head on a single sequence `x` (`seq × d`), built from
/// primitive ops: `softmax((xW_Q)(xW_K)ᵀ/√head_dim)(xW_V)`.
pub fn self_attention_head(
    g: &mut Graph,
    x: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let q = g.matmul(x, w_q)?;
    let k = g.matmul(x, w_k)?;
    let v = g.matmul(x, w_v)?;
    let head_dim = g.value(q).cols();
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
    if let Some(mask) = key_mask {
        let seq = g.value(scores).rows();
        let mut bias = Tensor::zeros(&[seq, mask.len()]);
        for r in 0..seq {
            for (c, &keep) in mask.iter().enumerate() {
                if !keep {
                    bias.set(r, c, f64::NEG_INFINITY);
                }
            }
        }
        let bias = g.constant(bias);
        scores = g.add(scores, bias)?;
    }
    let probs = g.softmax_rows(scores)?;
    g.matmul(probs, v)
}

/// Attention sub-layer: fused multi-head attention, output projection,
/// residual add and layer norm.
pub fn multi_head(
    g: &mut Graph,
    config: &ModelConfig,
    layer: &LayerParams<Var>,
    x: Var,
    layout: &Arc<AttentionLayout>,
    opts: &ForwardOptions,
    stream: u64,
) -> Result<Var> {
    if layout.heads == 0 {
        return Err(Error::contract("a layer must retain at least one attention head"));
    }
    let q = g.matmul(x, layer.w_q)?;
    let k = g.matmul(x, layer.w_k)?;
    let v = g.matmul(x, layer.w_v)?;
    let heads = g.attention(q, k, v, Arc::clone(layout))?;
    let proj = g.matmul(heads, layer.w_ao)?;
    let proj = g.add_row_vector(proj, layer.b_ao)?;
    let proj = g.dropout(proj, opts.dropout, opts.seed, stream)?;
    let res = g.add(x, proj)?;
    g.layer_norm(res, layer.attn_norm.gamma, layer.attn_norm.beta, config.eps)
}

/// FFN sub-layer: `max(0, xW_FI + b_FI)W_FO + b_FO`, residual add, layer norm.
pub fn ffn(
    g: &mut Graph,
    config: &ModelConfig,
    layer: &LayerParams<Var>,
    x: Var,
    opts: &ForwardOptions,
    stream: u64,
) -> Result<Var> {
    let h = g.matmul(x, layer.w_fi)?;
    let h = g.add_row_vector(h, layer.b_fi)?;
    let h = g.relu(h);
    let out = g.matmul(h, layer.w_fo)?;
    let out = g.add_row_vector(out, layer.b_fo)?;
    let out = g.dropout(out, opts.dropout, opts.seed, stream)?;
    let res = g.add(x, out)?;
    g.layer_norm(res, layer.ffn_norm.gamma, layer.ffn_norm.beta, config.eps)
}

pub fn forward(
    g: &mut Graph,
    config: &ModelConfig,
    p: &Params<Var>,
    batch: &Batch,
    opts: ForwardOptions,
) -> Result<ForwardTrace> {
    if config.layers == 0 || p.layers.len() != config.layers {
        return Err(Error::contract(format!(
            "forward: config declares {} layers, parameters hold {}",
            config.layers,
            p.layers.len()
        )));
    }
    if batch.batch == 0 || batch.seq == 0 {
        return Err(Error::input("empty batch"));
    }
    let layout = Arc::new(AttentionLayout {
        batch: batch.batch,
        seq: batch.seq,
        heads: config.heads,
        head_dim: config.head_dim,
        key_mask: batch.mask.clone(),
    });
    let mut x = embed(g, config, p, batch)?;
    let mut hidden = vec![x];
    let stream_base = opts.step.wrapping_mul(1 << 16);
    for (i, layer) in p.layers.iter().enumerate() {
        let s = stream_base + 2 * i as u64;
        let a = multi_head(g, config, layer, x, &layout, &opts, s)?;
        x = ffn(g, config, layer, a, &opts, s + 1)?;
        hidden.push(x);
    }
    let cls = g.gather_rows(x, &batch.first_positions())?;
    let logits = g.matmul(cls, p.w_c)?;
    let logits = g.add_row_vector(logits, p.b_c)?;
    Ok(ForwardTrace {
        logits,
        hidden,
        batch: batch.batch,
        seq: batch.seq,
        row_mask: batch.mask.clone(),
    })
}

/// Mean over the batch of `−log softmax(z)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}
