//! Engine for inference-time prompt memorization on a small decoder-only
//! transformer, with contrastive decoding strategies and a synthetic
//! knowledge-conflict evaluation harness.
//!
//! The crate is organized around the lifecycle of one experiment:
//! [`evalgen`] produces a facts corpus and QA examples, [`pipeline`] trains
//! a toy instruction-tuned checkpoint, [`memorizer`] adapts the last FFN
//! module of that checkpoint to one prompt at inference time, and
//! [`decoding`] generates answers with greedy or contrastive strategies.

pub mod decoding;
pub mod error;
pub mod evalgen;
pub mod memorizer;
pub mod memtrack;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod profile;
pub mod scalar;
pub mod template;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scalar::Scalar;
