use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

/// Token embedding: dense table or rank-`r` factor pair `u·v`.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenEmbedding<T> {
    Dense(T),
    Factorized { u: T, v: T },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_ao: T,
    pub b_ao: T,
    pub attn_norm: Norm<T>,
    pub w_fi: T,
    pub b_fi: T,
    pub w_fo: T,
    pub b_fo: T,
    pub ffn_norm: Norm<T>,
}

/// Every learnable array of the encoder.
///
/// Generic over the leaf type so the same layout serves concrete tensors,
/// graph handles and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub embedding: TokenEmbedding<T>,
    pub position: T,
    pub embed_norm: Norm<T>,
    pub layers: Vec<LayerParams<T>>,
    pub w_c: T,
    pub b_c: T,
}

pub type ParamStore = Params<Tensor>;

impl<T> Norm<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Norm<U> {
        Norm {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma),
            beta: f(&format!("{prefix}.beta"), &self.beta),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

impl<T> LayerParams<T> {
    fn map<U>(&self, i: usize, f: &mut impl FnMut(&str, &T) -> U) -> LayerParams<U> {
        let p = format!("layers.{i}");
        LayerParams {
            w_q: f(&format!("{p}.w_q"), &self.w_q),
            w_k: f(&format!("{p}.w_k"), &self.w_k),
            w_v: f(&format!("{p}.w_v"), &self.w_v),
            w_ao: f(&format!("{p}.w_ao"), &self.w_ao),
            b_ao: f(&format!("{p}.b_ao"), &self.b_ao),
            attn_norm: self.attn_norm.map(&format!("{p}.attn_norm"), f),
            w_fi: f(&format!("{p}.w_fi"), &self.w_fi),
            b_fi: f(&format!("{p}.b_fi"), &self.b_fi),
            w_fo: f(&format!("{p}.w_fo"), &self.w_fo),
            b_fo: f(&format!("{p}.b_fo"), &self.b_fo),
            ffn_norm: self.ffn_norm.map(&format!("{p}.ffn_norm"), f),
        }
    }

    fn visit_mut(&mut self, i: usize, f: &mut impl FnMut(&str, &mut T)) {
        let p = format!("layers.{i}");
        f(&format!("{p}.w_q"), &mut self.w_q);
        f(&format!("{p}.w_k"), &mut self.w_k);
        f(&format!("{p}.w_v"), &mut self.w_v);
        f(&format!("{p}.w_ao"), &mut self.w_ao);
        f(&format!("{p}.b_ao"), &mut self.b_ao);
        self.attn_norm.visit_mut(&format!("{p}.attn_norm"), f);
        f(&format!("{p}.w_fi"), &mut self.w_fi);
        f(&format!("{p}.b_fi"), &mut self.b_fi);
        f(&format!("{p}.w_fo"), &mut self.w_fo);
        f(&format!("{p}.b_fo"), &mut self.b_fo);
        self.ffn_norm.visit_mut(&format!("{p}.ffn_norm"), f);
    }
}

impl<T> Params<T> {
    /// Structure-preserving map in canonical order; `f` sees each leaf's
    /// dotted name (e.g. `layers.3.w_fi`).
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        let embedding = match &self.embedding {
            TokenEmbedding::Dense(t) => TokenEmbedding::Dense(f("embedding.table", t)),
            TokenEmbedding::Factorized { u, v } => TokenEmbedding::Factorized {
                u: f("embedding.u", u),
                v: f("embedding.v", v),
            },
        };
        let position = f("position", &self.position);
        let embed_norm = self.embed_norm.map("embed_norm", &mut f);
        let layers = self.layers.iter().enumerate().map(|(i, l)| l.map(i, &mut f)).collect();
        Params {
            embedding,
            position,
            embed_norm,
            layers,
            w_c: f("classifier.weight", &self.w_c),
            b_c: f("classifier.bias", &self.b_c),
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        match &mut self.embedding {
            TokenEmbedding::Dense(t) => f("embedding.table", t),
            TokenEmbedding::Factorized { u, v } => {
                f("embedding.u", u);
                f("embedding.v", v);
            }
        }
        f("position", &mut self.position);
        self.embed_norm.visit_mut("embed_norm", &mut f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(i, &mut f);
        }
        f("classifier.weight", &mut self.w_c);
        f("classifier.bias", &mut self.b_c);
    }

    pub fn visit(&self, mut f: impl FnMut(&str, &T)) {
        self.map(|name, t| f(name, t));
    }

    /// Leaves in canonical order.
    pub fn leaves(&self) -> Vec<&T> {
        let mut out: Vec<&T> = Vec::new();
        match &self.embedding {
            TokenEmbedding::Dense(t) => out.push(t),
            TokenEmbedding::Factorized { u, v } => {
                out.push(u);
                out.push(v);
            }
        }
        out.push(&self.position);
        out.push(&self.embed_norm.gamma);
        out.push(&self.embed_norm.beta);
        for l in &self.layers {
            out.extend([&l.w_q, &l.w_k, &l.w_v, &l.w_ao, &l.b_ao]);
            out.extend([&l.attn_norm.gamma, &l.attn_norm.beta]);
            out.extend([&l.w_fi, &l.b_fi, &l.w_fo, &l.b_fo]);
            out.extend([&l.ffn_norm.gamma, &l.ffn_norm.beta]);
        }
        out.push(&self.w_c);
        out.push(&self.b_c);
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = Vec::new();
        match &mut self.embedding {
            TokenEmbedding::Dense(t) => out.push(t),
            TokenEmbedding::Factorized { u, v } => {
                out.push(u);
                out.push(v);
            }
        }
        out.push(&mut self.position);
        out.push(&mut self.embed_norm.gamma);
        out.push(&mut self.embed_norm.beta);
        for l in &mut self.layers {
            out.extend([&mut l.w_q, &mut l.w_k, &mut l.w_v, &mut l.w_ao, &mut l.b_ao]);
            out.extend([&mut l.attn_norm.gamma, &mut l.attn_norm.beta]);
            out.extend([&mut l.w_fi, &mut l.b_fi, &mut l.w_fo, &mut l.b_fo]);
            out.extend([&mut l.ffn_norm.gamma, &mut l.ffn_norm.beta]);
        }
        out.push(&mut self.w_c);
        out.push(&mut self.b_c);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|n, _| names.push(n.to_string()));
        names
    }
}

impl ParamStore {
    /// Random initialization: weights ~ N(0, std²), biases 0, norms (1, 0).
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, std: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, w, di) = (config.hidden, config.attn_width(), config.intermediate);
        let norm = || Norm {
            gamma: Tensor::filled(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        };
        let embedding = if config.is_factorized() {
            TokenEmbedding::Factorized {
                u: Tensor::randn(&[config.vocab_size, config.rank], std, rng),
                v: Tensor::randn(&[config.rank, d], std, rng),
            }
        } else {
            TokenEmbedding::Dense(Tensor::randn(&[config.vocab_size, d], std, rng))
        };
        let position = Tensor::randn(&[config.max_len, d], std, rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                w_q: Tensor::randn(&[d, w], std, rng),
                w_k: Tensor::randn(&[d, w], std, rng),
                w_v: Tensor::randn(&[d, w], std, rng),
                w_ao: Tensor::randn(&[w, d], std, rng),
                b_ao: Tensor::zeros(&[d]),
                attn_norm: norm(),
                w_fi: Tensor::randn(&[d, di], std, rng),
                b_fi: Tensor::zeros(&[di]),
                w_fo: Tensor::randn(&[di, d], std, rng),
                b_fo: Tensor::zeros(&[d]),
                ffn_norm: norm(),
            })
            .collect();
        Ok(Params {
            embedding,
            position,
            embed_norm: norm(),
            layers,
            w_c: Tensor::randn(&[d, config.n_classes], std, rng),
            b_c: Tensor::zeros(&[config.n_classes]),
        })
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    pub fn numel(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }

    /// Expected shape of every named leaf under `config`.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, w, di) = (config.hidden, config.attn_width(), config.intermediate);
        let mut out = Vec::new();
        if config.is_factorized() {
            out.push(("embedding.u".into(), vec![config.vocab_size, config.rank]));
            out.push(("embedding.v".into(), vec![config.rank, d]));
        } else {
            out.push(("embedding.table".into(), vec![config.vocab_size, d]));
        }
        out.push(("position".into(), vec![config.max_len, d]));
        out.push(("embed_norm.gamma".into(), vec![d]));
        out.push(("embed_norm.beta".into(), vec![d]));
        for i in 0..config.layers {
            let p = format!("layers.{i}");
            for (n, s) in [
                ("w_q", vec![d, w]),
                ("w_k", vec![d, w]),
                ("w_v", vec![d, w]),
                ("w_ao", vec![w, d]),
                ("b_ao", vec![d]),
                ("attn_norm.gamma", vec![d]),
                ("attn_norm.beta", vec![d]),
                ("w_fi", vec![d, di]),
                ("b_fi", vec![di]),
                ("w_fo", vec![di, d]),
                ("b_fo", vec![d]),
                ("ffn_norm.gamma", vec![d]),
                ("ffn_norm.beta", vec![d]),
            ] {
                out.push((format!("{p}.{n}"), s));
            }
        }
        out.push(("classifier.weight".into(), vec![d, config.n_classes]));
        out.push(("classifier.bias".into(), vec![config.n_classes]));
        out
    }

    /// Asserts every shape agrees with `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::expected_shapes(config);
        let mut actual = Vec::new();
        self.visit(|n, t| actual.push((n.to_string(), t.shape().to_vec())));
        if actual.len() != expected.len() {
            return Err(Error::contract(format!(
                "parameter count mismatch: {} arrays for a config expecting {}",
                actual.len(),
                expected.len()
            )));
        }
        for ((an, ashape), (en, eshape)) in actual.iter().zip(&expected) {
            if an != en || ashape != eshape {
                return Err(Error::contract(format!(
                    "parameter `{an}` has shape {ashape:?}, expected `{en}` with {eshape:?}"
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds a store from named arrays in canonical order.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = Self::expected_shapes(config);
        if named.len() != expected.len() {
            return Err(Error::format(
                "parameters",
                format!("{} arrays present, config expects {}", named.len(), expected.len()),
            ));
        }
        for ((n, t), (en, es)) in named.iter().zip(&expected) {
            if n != en {
                return Err(Error::format("parameters", format!("found `{n}` where `{en}` expected")));
            }
            if t.shape() != es.as_slice() {
                return Err(Error::format(
                    n.clone(),
                    format!("shape {:?} disagrees with config shape {es:?}", t.shape()),
                ));
            }
        }
        let mut it = named.into_iter().map(|(_, t)| t);
        let mut next = || it.next().expect("length checked");
        let norm = |next: &mut dyn FnMut() -> Tensor| Norm {
            gamma: next(),
            beta: next(),
        };
        let embedding = if config.is_factorized() {
            let u = next();
            let v = next();
            TokenEmbedding::Factorized { u, v }
        } else {
            TokenEmbedding::Dense(next())
        };
        let position = next();
        let embed_norm = norm(&mut next);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let w_q = next();
            let w_k = next();
            let w_v = next();
            let w_ao = next();
            let b_ao = next();
            let attn_norm = norm(&mut next);
            let w_fi = next();
            let b_fi = next();
            let w_fo = next();
            let b_fo = next();
            let ffn_norm = norm(&mut next);
            layers.push(LayerParams {
                w_q,
                w_k,
                w_v,
                w_ao,
                b_ao,
                attn_norm,
                w_fi,
                b_fi,
                w_fo,
                b_fo,
                ffn_norm,
            });
        }
        let w_c = next();
        let b_c = next();
        Ok(Params {
            embedding,
            position,
            embed_norm,
            layers,
            w_c,
            b_c,
        })
    }
}
