use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Shape of the transformer. `num_blocks` is the K in "K transformer
/// blocks"; the early-exit machinery requires at least one block below K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_window: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale default: deep enough for early-exit candidate sets,
    /// small enough to train on a laptop CPU.
    pub fn desk_default() -> Self {
        ModelConfig {
            num_blocks: 8,
            d_model: 256,
            n_heads: 8,
            d_ff: 1024,
            vocab_size: 4096,
            context_window: 512,
            norm_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::invalid("head dimension must be even for rotary embeddings"));
        }
        if self.context_window < 16 {
            return Err(Error::invalid("context_window must be at least 16"));
        }
        if self.num_blocks < 2 {
            return Err(Error::invalid("need at least 2 blocks (an early-exit layer must exist)"));
        }
        if self.vocab_size == 0 {
            return Err(Error::invalid("vocab_size must be positive"));
        }
        Ok(())
    }
}
