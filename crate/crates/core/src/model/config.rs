use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of a [`ToyTransformer`](super::ToyTransformer).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default desk-scale shape for a vocabulary of the given size.
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            d_ffn: 256,
            n_heads: 4,
            vocab_size,
            max_seq_len: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_model == 0 {
            return bad("d_model and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ffn < self.d_model {
            return bad(format!(
                "d_ffn {} must be at least d_model {}",
                self.d_ffn, self.d_model
            ));
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
