//! Tiny decoder-only transformer: forward pass, KV-cache decoding,
//! early-exit readout, hidden-state capture, full backward pass, and the
//! checkpoint format.
//!
//! Architecture: pre-norm RMSNorm, rotary position embeddings, gated-SiLU
//! FFN with biases, untied unembedding.

mod backward;
mod checkpoint;
mod config;
mod forward;
mod kv;
mod params;

pub use backward::{backward_full, BlockGrads, ParamGrads};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ModelConfig;
pub use forward::{
    early_exit_distribution, forward_full, forward_residual, forward_training,
    readout_from_hidden, BlockTrace, ForwardTrace, HiddenStateCache,
};
pub use kv::{decode_step, decode_step_with_exits, KvCache};
pub use params::{BlockParams, FfnOverrides, ModelParams, ModelView};
