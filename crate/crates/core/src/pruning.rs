//! Structured pruning driven by first-order Taylor importance.
//!
//! Per-weight scores `|∂L/∂W_ij · W_ij|` are folded into unit scores:
//! FFN neurons sum their `W_FI` column, `b_FI` entry and `W_FO` row; heads
//! sum the `W_AO` rows they feed; embedding ranks sum their `E_U` column and
//! `E_V` row. Units with the lowest scores are removed by slicing the dense
//! matrices, so every surviving shape shrinks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, ForwardOptions, Model, ModelConfig, ParamStore, TokenEmbedding};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    FfnNeuron,
    AttentionHead,
    EmbeddingRank,
    Layer,
}

/// One removable structural unit, indexed against the current config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitId {
    pub kind: UnitKind,
    /// Absent for embedding ranks and whole layers.
    pub layer: Option<usize>,
    pub index: usize,
}

impl UnitId {
    pub fn neuron(layer: usize, index: usize) -> Self {
        Self {
            kind: UnitKind::FfnNeuron,
            layer: Some(layer),
            index,
        }
    }

    pub fn head(layer: usize, index: usize) -> Self {
        Self {
            kind: UnitKind::AttentionHead,
            layer: Some(layer),
            index,
        }
    }

    pub fn rank(index: usize) -> Self {
        Self {
            kind: UnitKind::EmbeddingRank,
            layer: None,
            index,
        }
    }

    pub fn layer(index: usize) -> Self {
        Self {
            kind: UnitKind::Layer,
            layer: None,
            index,
        }
    }
}

/// Target values of the four compressible dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureTarget {
    pub heads: usize,
    pub layers: usize,
    pub intermediate: usize,
    pub rank: usize,
}

impl ArchitectureTarget {
    pub fn of(config: &ModelConfig) -> Self {
        Self {
            heads: config.heads,
            layers: config.layers,
            intermediate: config.intermediate,
            rank: if config.is_factorized() { config.rank } else { config.max_rank() },
        }
    }

    /// Applies this target to `config` (rank 0 stays dense only if the model
    /// is dense and the target keeps full rank).
    pub fn apply_to(&self, config: &ModelConfig) -> ModelConfig {
        ModelConfig {
            heads: self.heads,
            layers: self.layers,
            intermediate: self.intermediate,
            rank: if !config.is_factorized() && self.rank == config.max_rank() {
                0
            } else {
                self.rank
            },
            ..config.clone()
        }
    }
}

/// How many units one pruning step removes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    #[serde(default)]
    pub heads_per_layer: usize,
    #[serde(default)]
    pub neurons_per_layer: usize,
    #[serde(default)]
    pub ranks: usize,
    #[serde(default)]
    pub layers: usize,
}

impl Removal {
    /// Removal taking `config` to `target`; fails if any target exceeds the
    /// current value.
    pub fn between(config: &ModelConfig, target: &ArchitectureTarget) -> Result<Self> {
        let current = ArchitectureTarget::of(config);
        let delta = |name: &str, cur: usize, tgt: usize| {
            if tgt == 0 || tgt > cur {
                Err(Error::config(format!("target {name} = {tgt} must be within 1..={cur}")))
            } else {
                Ok(cur - tgt)
            }
        };
        Ok(Self {
            heads_per_layer: delta("heads", current.heads, target.heads)?,
            layers: delta("layers", current.layers, target.layers)?,
            neurons_per_layer: delta("intermediate", current.intermediate, target.intermediate)?,
            ranks: delta("rank", current.rank, target.rank)?,
        })
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    pub fn scaled(&self, k: usize) -> Self {
        Self {
            heads_per_layer: self.heads_per_layer * k,
            neurons_per_layer: self.neurons_per_layer * k,
            ranks: self.ranks * k,
            layers: self.layers * k,
        }
    }

    pub fn plus(&self, other: &Self) -> Self {
        Self {
            heads_per_layer: self.heads_per_layer + other.heads_per_layer,
            neurons_per_layer: self.neurons_per_layer + other.neurons_per_layer,
            ranks: self.ranks + other.ranks,
            layers: self.layers + other.layers,
        }
    }
}

/// Unit-level importance for every prunable dimension.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnitScores {
    /// `[layer][head]`
    pub heads: Vec<Vec<f64>>,
    /// `[layer][neuron]`
    pub neurons: Vec<Vec<f64>>,
    /// Empty for a dense embedding.
    pub ranks: Vec<f64>,
}

impl UnitScores {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            heads: vec![vec![0.0; config.heads]; config.layers],
            neurons: vec![vec![0.0; config.intermediate]; config.layers],
            ranks: vec![0.0; config.rank],
        }
    }

    fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.heads.len() != other.heads.len() || self.ranks.len() != other.ranks.len() {
            return Err(Error::contract("unit score layouts differ"));
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            add_vec(a, b)?;
        }
        for (a, b) in self.neurons.iter_mut().zip(&other.neurons) {
            add_vec(a, b)?;
        }
        add_vec(&mut self.ranks, &other.ranks)
    }

    fn scale(&self, s: f64) -> Self {
        let sv = |v: &Vec<f64>| v.iter().map(|x| x * s).collect::<Vec<_>>();
        Self {
            heads: self.heads.iter().map(sv).collect(),
            neurons: self.neurons.iter().map(sv).collect(),
            ranks: sv(&self.ranks),
        }
    }
}

fn add_vec(a: &mut [f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::contract("unit score vector lengths differ"));
    }
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    Ok(())
}

/// `|∂L/∂W_ij · W_ij|` for every parameter array.
pub fn weight_taylor_scores(params: &ParamStore, grads: &ParamStore) -> Result<ParamStore> {
    let (pl, gl) = (params.leaves(), grads.leaves());
    if pl.len() != gl.len() || pl.iter().zip(&gl).any(|(p, g)| p.shape() != g.shape()) {
        return Err(Error::contract("gradients missing or not shaped like the parameters"));
    }
    let mut grad_iter = gl.into_iter();
    Ok(params.map(|_, w| {
        let g = grad_iter.next().expect("same length");
        let data = w.data().iter().zip(g.data()).map(|(w, g)| (w * g).abs()).collect();
        Tensor::new(w.shape().to_vec(), data).expect("same shape")
    }))
}

/// Per-neuron importance of FFN `layer`:
/// `Σ_i S(W_FI[i,j]) + Σ_k S(W_FO[j,k]) + S(b_FI[j])`.
pub fn neuron_importance(scores: &ParamStore, layer: usize) -> Vec<f64> {
    let l = &scores.layers[layer];
    let (d, di) = (l.w_fi.rows(), l.w_fi.cols());
    let mut out: Vec<f64> = l.b_fi.data().to_vec();
    for i in 0..d {
        for (j, o) in out.iter_mut().enumerate() {
            *o += l.w_fi.data()[i * di + j];
        }
    }
    for (j, o) in out.iter_mut().enumerate() {
        *o += l.w_fo.row(j).iter().sum::<f64>();
    }
    out
}

/// Per-head importance of attention `layer`: the summed scores of the
/// `head_dim` rows of `W_AO` fed by each head.
pub fn head_importance(scores: &ParamStore, layer: usize, head_dim: usize) -> Vec<f64> {
    let w_ao = &scores.layers[layer].w_ao;
    let heads = w_ao.rows() / head_dim;
    (0..heads)
        .map(|h| (h * head_dim..(h + 1) * head_dim).map(|r| w_ao.row(r).iter().sum::<f64>()).sum())
        .collect()
}

/// Taylor importance of embedding rank `i`: column `i` of `E_U` plus row `i`
/// of `E_V`. Empty for a dense embedding.
pub fn rank_taylor_scores(scores: &ParamStore) -> Vec<f64> {
    match &scores.embedding {
        TokenEmbedding::Dense(_) => Vec::new(),
        TokenEmbedding::Factorized { u, v } => {
            let r = u.cols();
            let mut out = vec![0.0; r];
            for row in u.data().chunks(r) {
                out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
            }
            for (o, i) in out.iter_mut().zip(0..r) {
                *o += v.row(i).iter().sum::<f64>();
            }
            out
        }
    }
}

/// Folds per-weight scores into unit scores.
pub fn aggregate_unit_scores(scores: &ParamStore, config: &ModelConfig) -> UnitScores {
    UnitScores {
        heads: (0..config.layers).map(|l| head_importance(scores, l, config.head_dim)).collect(),
        neurons: (0..config.layers).map(|l| neuron_importance(scores, l)).collect(),
        ranks: rank_taylor_scores(scores),
    }
}

/// Embedding-rank importance: singular values right after factorization,
/// afterwards the Taylor scores accumulated in `ledger`.
pub fn rank_importance(model: &Model, ledger: Option<&ImportanceLedger>) -> Result<Vec<f64>> {
    if !model.config.is_factorized() {
        return Err(Error::contract("rank importance requires a factorized embedding"));
    }
    if let Some(sigma) = &model.singular_values {
        return Ok(sigma.clone());
    }
    let ledger = ledger.ok_or_else(|| Error::contract("factors were trained; Taylor scores are required"))?;
    Ok(ledger.report().ranks)
}

/// Gradients of the mean cross-entropy of `model` on a labelled batch.
pub fn cross_entropy_gradients(model: &Model, batch: &Batch, labels: &[usize]) -> Result<(f64, ParamStore)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let trace = model.forward(&mut g, &bound, batch, ForwardOptions::default())?;
    let loss = g.cross_entropy(trace.logits, labels)?;
    let grads = g.backward(loss)?;
    let value = g.value(loss).data()[0];
    Ok((value, bound.map(|_, v| grads.wrt(*v))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Mean of per-batch scores over a pass of the data.
    OneStepAverage,
    /// Raw sum since the last pruning event.
    IterativeAccumulate,
}

/// Running unit-level Taylor scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceLedger {
    pub mode: ScoreMode,
    sums: UnitScores,
    pub batches_seen: usize,
    pub steps_since_last_prune: usize,
}

impl ImportanceLedger {
    pub fn new(mode: ScoreMode, config: &ModelConfig) -> Self {
        Self {
            mode,
            sums: UnitScores::zeros(config),
            batches_seen: 0,
            steps_since_last_prune: 0,
        }
    }

    /// Adds one batch worth of unit scores.
    pub fn record(&mut self, mode: ScoreMode, scores: &UnitScores) -> Result<()> {
        if mode != self.mode {
            return Err(Error::contract(format!(
                "ledger was created in {:?} mode, cannot record {mode:?} scores",
                self.mode
            )));
        }
        self.sums.add_assign(scores)?;
        self.batches_seen += 1;
        self.steps_since_last_prune += 1;
        Ok(())
    }

    /// Scores used for selection: the mean in one-step mode, the raw sum in
    /// iterative mode.
    pub fn report(&self) -> UnitScores {
        match self.mode {
            ScoreMode::OneStepAverage if self.batches_seen > 0 => self.sums.scale(1.0 / self.batches_seen as f64),
            _ => self.sums.clone(),
        }
    }

    /// Clears the accumulators and re-shapes them for a (pruned) config.
    pub fn reset(&mut self, config: &ModelConfig) {
        self.sums = UnitScores::zeros(config);
        self.batches_seen = 0;
        self.steps_since_last_prune = 0;
    }
}

/// Runs one backward pass of the task loss on `batch` and records the
/// resulting unit scores.
pub fn record_batch_scores(
    ledger: &mut ImportanceLedger,
    mode: ScoreMode,
    model: &Model,
    batch: &Batch,
    labels: &[usize],
) -> Result<()> {
    let (_, grads) = cross_entropy_gradients(model, batch, labels)?;
    record_gradients(ledger, mode, model, &grads)
}

/// Records unit scores derived from already-computed gradients.
pub fn record_gradients(ledger: &mut ImportanceLedger, mode: ScoreMode, model: &Model, grads: &ParamStore) -> Result<()> {
    let weights = weight_taylor_scores(&model.params, grads)?;
    ledger.record(mode, &aggregate_unit_scores(&weights, &model.config))
}

/// Indices of the `count` lowest scores; ties go to the lower index.
fn lowest(scores: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut out: Vec<usize> = idx.into_iter().take(count).collect();
    out.sort_unstable();
    out
}

/// Chooses the units to remove: per surviving layer the lowest-scoring
/// heads and neurons, the lowest-scoring embedding ranks, and layers from
/// the top down.
pub fn select_prune_set(scores: &UnitScores, config: &ModelConfig, request: &Removal) -> Result<Vec<UnitId>> {
    if request.layers >= config.layers {
        return Err(Error::contract(format!(
            "removing {} of {} layers would leave none",
            request.layers, config.layers
        )));
    }
    if request.heads_per_layer >= config.heads {
        return Err(Error::contract(format!(
            "removing {} of {} heads per layer would empty a layer",
            request.heads_per_layer, config.heads
        )));
    }
    if request.neurons_per_layer >= config.intermediate {
        return Err(Error::contract(format!(
            "removing {} of {} FFN neurons per layer would empty a layer",
            request.neurons_per_layer, config.intermediate
        )));
    }
    if request.ranks > 0 && (!config.is_factorized() || request.ranks >= config.rank) {
        return Err(Error::contract(format!(
            "cannot remove {} embedding ranks from rank {}",
            request.ranks, config.rank
        )));
    }
    let surviving = config.layers - request.layers;
    if (request.heads_per_layer > 0 || request.neurons_per_layer > 0)
        && (scores.heads.len() < surviving || scores.neurons.len() < surviving)
    {
        return Err(Error::contract("unit scores do not cover every layer"));
    }
    let mut out = Vec::new();
    for l in 0..surviving {
        if request.heads_per_layer > 0 {
            if scores.heads[l].len() != config.heads {
                return Err(Error::contract(format!("layer {l}: head scores out of date")));
            }
            out.extend(lowest(&scores.heads[l], request.heads_per_layer).into_iter().map(|h| UnitId::head(l, h)));
        }
        if request.neurons_per_layer > 0 {
            if scores.neurons[l].len() != config.intermediate {
                return Err(Error::contract(format!("layer {l}: neuron scores out of date")));
            }
            out.extend(lowest(&scores.neurons[l], request.neurons_per_layer).into_iter().map(|n| UnitId::neuron(l, n)));
        }
    }
    if request.ranks > 0 {
        if scores.ranks.len() != config.rank {
            return Err(Error::contract("rank scores out of date"));
        }
        out.extend(lowest(&scores.ranks, request.ranks).into_iter().map(UnitId::rank));
    }
    out.extend((surviving..config.layers).rev().map(UnitId::layer));
    Ok(out)
}

/// Index sets that survive a surgery, validated against a config.
#[derive(Clone, Debug, PartialEq)]
pub struct SurgeryPlan {
    pub keep_layers: Vec<usize>,
    /// `[old_layer]` → kept head indices.
    pub keep_heads: Vec<Vec<usize>>,
    pub keep_neurons: Vec<Vec<usize>>,
    pub keep_ranks: Option<Vec<usize>>,
    pub head_dim: usize,
    pub new_config: ModelConfig,
}

impl SurgeryPlan {
    pub fn new(config: &ModelConfig, prune_set: &[UnitId]) -> Result<Self> {
        let mut drop_layers = vec![false; config.layers];
        let mut drop_heads = vec![vec![false; config.heads]; config.layers];
        let mut drop_neurons = vec![vec![false; config.intermediate]; config.layers];
        let mut drop_ranks = vec![false; config.rank];
        let flag = |slot: &mut bool, u: &UnitId| {
            if *slot {
                return Err(Error::contract(format!("unit {u:?} listed twice")));
            }
            *slot = true;
            Ok(())
        };
        for u in prune_set {
            let bad = || Error::contract(format!("unit {u:?} out of range for the current config"));
            match u.kind {
                UnitKind::Layer => flag(drop_layers.get_mut(u.index).ok_or_else(bad)?, u)?,
                UnitKind::EmbeddingRank => {
                    if !config.is_factorized() {
                        return Err(Error::contract("embedding is dense; no ranks to prune"));
                    }
                    flag(drop_ranks.get_mut(u.index).ok_or_else(bad)?, u)?
                }
                UnitKind::AttentionHead => {
                    let l = u.layer.ok_or_else(bad)?;
                    flag(drop_heads.get_mut(l).and_then(|h| h.get_mut(u.index)).ok_or_else(bad)?, u)?
                }
                UnitKind::FfnNeuron => {
                    let l = u.layer.ok_or_else(bad)?;
                    flag(drop_neurons.get_mut(l).and_then(|h| h.get_mut(u.index)).ok_or_else(bad)?, u)?
                }
            }
        }
        let kept = |flags: &[bool]| -> Vec<usize> { (0..flags.len()).filter(|&i| !flags[i]).collect() };
        let keep_layers = kept(&drop_layers);
        if keep_layers.is_empty() {
            return Err(Error::contract("surgery would remove every layer"));
        }
        let keep_heads: Vec<Vec<usize>> = drop_heads.iter().map(|f| kept(f)).collect();
        let keep_neurons: Vec<Vec<usize>> = drop_neurons.iter().map(|f| kept(f)).collect();
        let uniform = |sets: &[Vec<usize>], what: &str| -> Result<usize> {
            let n = sets[keep_layers[0]].len();
            if keep_layers.iter().any(|&l| sets[l].len() != n) {
                return Err(Error::contract(format!("{what} pruning must remove the same count from every layer")));
            }
            if n == 0 {
                return Err(Error::contract(format!("surgery would remove every {what} of a layer")));
            }
            Ok(n)
        };
        let heads = uniform(&keep_heads, "attention head")?;
        let intermediate = uniform(&keep_neurons, "FFN neuron")?;
        let keep_ranks = if config.is_factorized() {
            let k = kept(&drop_ranks);
            if k.is_empty() {
                return Err(Error::contract("surgery would remove every embedding rank"));
            }
            Some(k)
        } else {
            None
        };
        let new_config = ModelConfig {
            heads,
            layers: keep_layers.len(),
            intermediate,
            rank: keep_ranks.as_ref().map_or(0, |k| k.len()),
            ..config.clone()
        };
        Ok(Self {
            keep_layers,
            keep_heads,
            keep_neurons,
            keep_ranks,
            head_dim: config.head_dim,
            new_config,
        })
    }

    /// Slices a parameter-shaped store (weights or optimizer moments).
    pub fn apply(&self, p: &ParamStore) -> Result<ParamStore> {
        let embedding = match (&p.embedding, &self.keep_ranks) {
            (TokenEmbedding::Dense(t), None) => TokenEmbedding::Dense(t.clone()),
            (TokenEmbedding::Factorized { u, v }, Some(keep)) => TokenEmbedding::Factorized {
                u: u.select_cols(keep)?,
                v: v.select_rows(keep)?,
            },
            _ => return Err(Error::contract("embedding layout disagrees with the surgery plan")),
        };
        let mut layers = Vec::with_capacity(self.keep_layers.len());
        for &l in &self.keep_layers {
            let src = p
                .layers
                .get(l)
                .ok_or_else(|| Error::contract(format!("layer {l} missing from store")))?;
            let cols: Vec<usize> = self.keep_heads[l]
                .iter()
                .flat_map(|&h| h * self.head_dim..(h + 1) * self.head_dim)
                .collect();
            let neurons = &self.keep_neurons[l];
            let mut layer = src.clone();
            layer.w_q = src.w_q.select_cols(&cols)?;
            layer.w_k = src.w_k.select_cols(&cols)?;
            layer.w_v = src.w_v.select_cols(&cols)?;
            layer.w_ao = src.w_ao.select_rows(&cols)?;
            layer.w_fi = src.w_fi.select_cols(neurons)?;
            layer.b_fi = src.b_fi.select_rows(neurons)?;
            layer.w_fo = src.w_fo.select_rows(neurons)?;
            layers.push(layer);
        }
        let out = ParamStore {
            embedding,
            position: p.position.clone(),
            embed_norm: p.embed_norm.clone(),
            layers,
            w_c: p.w_c.clone(),
            b_c: p.b_c.clone(),
        };
        out.check_shapes(&self.new_config)?;
        Ok(out)
    }
}

/// Removes the listed units from `model`. On error the model is untouched.
pub fn apply_surgery(model: &mut Model, prune_set: &[UnitId]) -> Result<SurgeryPlan> {
    let plan = SurgeryPlan::new(&model.config, prune_set)?;
    let params = plan.apply(&model.params)?;
    let sigma = match (&model.singular_values, &plan.keep_ranks) {
        (Some(s), Some(keep)) => Some(keep.iter().map(|&i| s[i]).collect()),
        _ => None,
    };
    model.params = params;
    model.config = plan.new_config.clone();
    model.singular_values = sigma;
    model.check_invariants()?;
    Ok(plan)
}

/// Keeps the first `target` layers.
pub fn drop_layers(model: &mut Model, target: usize) -> Result<SurgeryPlan> {
    let layers = model.config.layers;
    if target == 0 || target > layers {
        return Err(Error::contract(format!("layer target {target} outside 1..={layers}")));
    }
    let set: Vec<UnitId> = (target..layers).map(UnitId::layer).collect();
    apply_surgery(model, &set)
}

/// Copy of `model` in which the listed heads, neurons and ranks are zeroed
/// in place rather than removed. Layers cannot be masked this way.
pub fn zero_mask(model: &Model, prune_set: &[UnitId]) -> Result<Model> {
    let mut out = model.clone();
    let hd = model.config.head_dim;
    for u in prune_set {
        match (u.kind, u.layer) {
            (UnitKind::AttentionHead, Some(l)) => {
                let layer = &mut out.params.layers[l];
                for c in u.index * hd..(u.index + 1) * hd {
                    for w in [&mut layer.w_q, &mut layer.w_k, &mut layer.w_v] {
                        for r in 0..w.rows() {
                            w.set(r, c, 0.0);
                        }
                    }
                    let width = layer.w_ao.cols();
                    layer.w_ao.data_mut()[c * width..(c + 1) * width].fill(0.0);
                }
            }
            (UnitKind::FfnNeuron, Some(l)) => {
                let layer = &mut out.params.layers[l];
                for r in 0..layer.w_fi.rows() {
                    layer.w_fi.set(r, u.index, 0.0);
                }
                layer.b_fi.data_mut()[u.index] = 0.0;
                let c = layer.w_fo.cols();
                layer.w_fo.data_mut()[u.index * c..(u.index + 1) * c].fill(0.0);
            }
            (UnitKind::EmbeddingRank, None) => {
                let TokenEmbedding::Factorized { u: eu, v: ev } = &mut out.params.embedding else {
                    return Err(Error::contract("dense embedding has no ranks"));
                };
                for r in 0..eu.rows() {
                    eu.set(r, u.index, 0.0);
                }
                let c = ev.cols();
                ev.data_mut()[u.index * c..(u.index + 1) * c].fill(0.0);
            }
            _ => return Err(Error::contract(format!("unit {u:?} cannot be zero-masked"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            heads: 3,
            layers: 2,
            hidden: 8,
            intermediate: 5,
            head_dim: 2,
            rank: 4,
            vocab_size: 12,
            max_len: 6,
            n_classes: 2,
            eps: 1e-12,
        }
    }

    #[test]
    fn selection_rules() {
        assert_eq!(lowest(&[5.0, 1.0, 3.0], 1), vec![1]);
        assert_eq!(lowest(&[2.0, 2.0, 7.0], 1), vec![0]);
        assert!(lowest(&[2.0, 2.0, 7.0], 0).is_empty());
        let cfg = tiny_config();
        let scores = UnitScores::zeros(&cfg);
        assert!(select_prune_set(&scores, &cfg, &Removal::default()).unwrap().is_empty());
        let emptying = Removal {
            heads_per_layer: 3,
            ..Removal::default()
        };
        assert!(select_prune_set(&scores, &cfg, &emptying).is_err());
    }

    #[test]
    fn single_score_maps_to_single_neuron() {
        let cfg = tiny_config();
        let mut rng = rand::rngs::mock::StepRng::new(1, 1);
        let store = ParamStore::init(&cfg, 0.1, &mut rng).unwrap();
        let mut scores = store.zeros_like();
        scores.layers[0].w_fi.set(0, 3, 1.5);
        let n = neuron_importance(&scores, 0);
        assert_eq!(n, vec![0.0, 0.0, 0.0, 1.5, 0.0]);
        scores.layers[0].w_ao.set(2, 0, 0.5); // row 2 belongs to head 1
        assert_eq!(head_importance(&scores, 0, 2), vec![0.0, 0.5, 0.0]);
    }

    #[test]
    fn ledger_modes() {
        let cfg = tiny_config();
        let mut one = UnitScores::zeros(&cfg);
        one.ranks = vec![1.0, 2.0, 3.0, 4.0];
        let mut avg = ImportanceLedger::new(ScoreMode::OneStepAverage, &cfg);
        avg.record(ScoreMode::OneStepAverage, &one).unwrap();
        avg.record(ScoreMode::OneStepAverage, &one).unwrap();
        assert_eq!(avg.report(), one);
        assert!(avg.record(ScoreMode::IterativeAccumulate, &one).is_err());

        let mut acc = ImportanceLedger::new(ScoreMode::IterativeAccumulate, &cfg);
        acc.record(ScoreMode::IterativeAccumulate, &one).unwrap();
        acc.record(ScoreMode::IterativeAccumulate, &one).unwrap();
        assert_eq!(acc.report().ranks, vec![2.0, 4.0, 6.0, 8.0]);
        acc.reset(&cfg);
        assert_eq!(acc.report(), UnitScores::zeros(&cfg));
        assert_eq!(acc.steps_since_last_prune, 0);
    }

    #[test]
    fn surgery_rejects_bad_sets_without_mutation() {
        let cfg = tiny_config();
        let mut rng = rand::rngs::mock::StepRng::new(3, 7);
        let mut model = Model::init(cfg, &mut rng).unwrap();
        let before = model.clone();
        // non-uniform head removal
        assert!(apply_surgery(&mut model, &[UnitId::head(0, 1)]).is_err());
        // duplicate
        assert!(apply_surgery(&mut model, &[UnitId::rank(1), UnitId::rank(1)]).is_err());
        // out of range
        assert!(apply_surgery(&mut model, &[UnitId::neuron(5, 0)]).is_err());
        assert_eq!(model, before);
        apply_surgery(&mut model, &[]).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn removal_between_targets() {
        let cfg = ModelConfig {
            rank: 768,
            ..ModelConfig::bert_base()
        };
        let target = ArchitectureTarget {
            heads: 2,
            layers: 8,
            intermediate: 512,
            rank: 128,
        };
        let r = Removal::between(&cfg, &target).unwrap();
        assert_eq!(
            r,
            Removal {
                heads_per_layer: 10,
                neurons_per_layer: 2560,
                ranks: 640,
                layers: 4
            }
        );
        assert!(Removal::between(&cfg, &ArchitectureTarget { heads: 13, ..target }).is_err());
    }
}
