use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structural dimensions of the encoder.
///
/// The four compressible axes are `heads`, `layers`, `intermediate` and
/// `rank`; `hidden` stays fixed across every compression step. `rank == 0`
/// means the token embedding is a dense `vocab_size × hidden` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub heads: usize,
    pub layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub head_dim: usize,
    #[serde(default)]
    pub rank: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_classes: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-12
}

impl ModelConfig {
    /// BERT-base shaped config (12 heads of 64, 12 layers, 768 hidden).
    pub fn bert_base() -> Self {
        Self {
            heads: 12,
            layers: 12,
            hidden: 768,
            intermediate: 3072,
            head_dim: 64,
            rank: 0,
            vocab_size: 30522,
            max_len: 512,
            n_classes: 2,
            eps: 1e-12,
        }
    }

    pub fn is_factorized(&self) -> bool {
        self.rank > 0
    }

    /// Width of the concatenated head outputs, `heads·head_dim`.
    pub fn attn_width(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Upper bound on the factorized embedding rank.
    pub fn max_rank(&self) -> usize {
        self.vocab_size.min(self.hidden)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("heads", self.heads),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(format!("model config: {name} must be ≥ 1")));
            }
        }
        if self.rank > self.max_rank() {
            return Err(Error::contract(format!(
                "model config: rank {} exceeds min(vocab, hidden) = {}",
                self.rank,
                self.max_rank()
            )));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::contract("model config: eps must be finite and ≥ 0"));
        }
        Ok(())
    }

    /// Parameters in one transformer layer.
    ///
    /// Q/K/V projections carry no bias; the attention output projection,
    /// both FFN projections and the two layer norms do.
    pub fn layer_param_count(&self) -> usize {
        let (d, w, di) = (self.hidden, self.attn_width(), self.intermediate);
        3 * d * w          // W_Q, W_K, W_V
            + w * d + d    // W_AO, b_AO
            + 2 * d        // attention layer norm
            + d * di + di  // W_FI, b_FI
            + di * d + d   // W_FO, b_FO
            + 2 * d // FFN layer norm
    }

    /// Token embedding parameters: `|V|·d` dense or `|V|·r + r·d` factorized.
    pub fn embedding_param_count(&self) -> usize {
        if self.is_factorized() {
            self.vocab_size * self.rank + self.rank * self.hidden
        } else {
            self.vocab_size * self.hidden
        }
    }

    /// Exact parameter count.
    ///
    /// Convention: token embedding (dense or factorized) + learned position
    /// embeddings (`max_len·d`, never factorized) + embedding layer norm +
    /// `layers × layer_param_count` + linear classifier on the first token.
    /// No pooler, no token-type embeddings.
    pub fn count_params(&self) -> usize {
        let d = self.hidden;
        self.embedding_param_count()
            + self.max_len * d
            + 2 * d
            + self.layers * self.layer_param_count()
            + d * self.n_classes
            + self.n_classes
    }
}

/// Free-function form of [`ModelConfig::count_params`].
pub fn count_params(config: &ModelConfig) -> usize {
    config.count_params()
}
