#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rosita_core::model::{Batch, Model, ModelConfig, ParamStore};
use rosita_core::tensor::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_config(heads: usize, layers: usize, hidden: usize, intermediate: usize, rank: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        heads,
        layers,
        hidden,
        intermediate,
        head_dim: hidden / heads,
        rank,
        vocab_size: vocab,
        max_len: 8,
        n_classes: 2,
        eps: 1e-12,
    }
}

/// Random model with weights large enough that ReLUs and softmaxes are far
/// from degenerate, and non-trivial norm parameters and biases.
pub fn random_model(config: &ModelConfig, seed: u64) -> Model {
    let mut r = rng(seed);
    let mut params = ParamStore::init(config, 0.3, &mut r).unwrap();
    params.visit_mut(|name, t| {
        if name.ends_with("gamma") || name.ends_with("beta") || name.contains("b_") || name.ends_with("bias") {
            let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
            for x in t.data_mut() {
                *x = base + r.gen_range(-0.3..0.3);
            }
        }
    });
    Model::new(config.clone(), params).unwrap()
}

/// Batch of random sequences of differing lengths (padding included).
pub fn random_batch(config: &ModelConfig, batch: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let seqs: Vec<Vec<usize>> = (0..batch)
        .map(|_| {
            let len = r.gen_range(2..=config.max_len.min(6));
            (0..len).map(|_| r.gen_range(1..config.vocab_size)).collect()
        })
        .collect();
    Batch::from_sequences(&seqs).unwrap()
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Loss builder used by gradient checks: receives the graph and bound
/// parameters, returns a scalar.
pub type LossFn<'a> = dyn Fn(&mut Graph, &rosita_core::model::Params<Var>) -> Var + 'a;

/// Max over every parameter entry of the gradient error between reverse
/// mode and central differences. Entries where both derivatives are below
/// `floor` in magnitude count as agreeing.
pub fn model_gradient_error(model: &Model, loss: &LossFn<'_>, h: f64, floor: f64) -> (f64, String) {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let l = loss(&mut g, &bound);
    let grads = g.backward(l).unwrap();
    let analytic = bound.map(|_, v| grads.wrt(*v));

    let eval = |m: &Model| -> f64 {
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let l = loss(&mut g, &b);
        g.value(l).data()[0]
    };

    let names = model.params.names();
    let mut worst = (0.0f64, String::new());
    for (leaf, (name, a)) in names.iter().zip(analytic.leaves()).enumerate() {
        for i in 0..a.numel() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.params.leaves_mut()[leaf].data_mut()[i] += h;
            minus.params.leaves_mut()[leaf].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = a.data()[i];
            let scale = an.abs().max(numeric.abs());
            let err = if scale < floor { 0.0 } else { (an - numeric).abs() / scale };
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]: analytic {an:e} numeric {numeric:e}"));
            }
        }
    }
    worst
}

/// Random valid prune set over heads, neurons and (if factorized) ranks,
/// removing the same number of units from every layer.
pub fn random_prune_set(config: &ModelConfig, seed: u64) -> Vec<rosita_core::pruning::UnitId> {
    use rand::seq::index::sample;
    use rosita_core::pruning::UnitId;
    let mut r = rng(seed);
    let heads = r.gen_range(0..config.heads);
    let neurons = r.gen_range(0..config.intermediate);
    let mut out = Vec::new();
    for l in 0..config.layers {
        out.extend(sample(&mut r, config.heads, heads).into_iter().map(|h| UnitId::head(l, h)));
        out.extend(sample(&mut r, config.intermediate, neurons).into_iter().map(|n| UnitId::neuron(l, n)));
    }
    if config.is_factorized() {
        let ranks = r.gen_range(0..config.rank);
        out.extend(sample(&mut r, config.rank, ranks).into_iter().map(UnitId::rank));
    }
    out
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut out = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                out[idx[k]] = avg;
            }
            i = j + 1;
        }
        out
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - mean) * (y - mean)).sum();
    let va: f64 = ra.iter().map(|x| (x - mean).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mean).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Small synthetic task that trains in well under a second.
pub fn tiny_task(seed: u64) -> rosita_core::io::TaskData {
    let cfg = rosita_core::synthetic::SyntheticConfig {
        n_train: 48,
        n_aug_per_train: 1,
        n_dev: 32,
        max_words: 6,
        seed,
        ..Default::default()
    };
    rosita_core::synthetic::synthetic_task(&cfg).unwrap()
}

/// Teacher-shaped config sized for [`tiny_task`].
pub fn tiny_config(data: &rosita_core::io::TaskData) -> ModelConfig {
    ModelConfig {
        heads: 4,
        layers: 4,
        hidden: 16,
        intermediate: 24,
        head_dim: 4,
        rank: 0,
        vocab_size: data.vocab.len(),
        max_len: data.spec.max_len,
        n_classes: data.spec.n_classes,
        eps: 1e-12,
    }
}
