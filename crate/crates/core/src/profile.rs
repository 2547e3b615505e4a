//! Wall-time and peak-memory profiling of the three phases: memorization,
//! prefill, and decoding. Peak memory uses the counting allocator's
//! high-water mark, reset at each phase boundary; without the allocator
//! installed the byte counts are reported as zero.

use crate::error::{Error, Result};
use crate::memorizer::{AdaptationSession, MemorizationConfig};
use crate::memtrack;
use crate::model::{decode_step, KvCache, ModelParams, ModelView};
use crate::numeric::Distribution;
use crate::scalar::Scalar;
use crate::template::TokenizedPrompt;
use crate::tokenizer::{TokenId, EOT};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseProfile {
    pub seconds: f64,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileReport {
    pub prompt_tokens: usize,
    pub decoded_tokens: usize,
    /// True when peak bytes come from the counting allocator; false means
    /// the allocator is not installed and the byte counts are zero.
    pub memory_tracked: bool,
    pub memorize: PhaseProfile,
    pub prefill: PhaseProfile,
    pub decode: PhaseProfile,
}

fn phase<R>(f: impl FnOnce() -> Result<R>) -> Result<(R, PhaseProfile)> {
    let tracked = memtrack::is_installed();
    if tracked {
        memtrack::reset_peak();
    }
    let t0 = Instant::now();
    let out = f()?;
    let seconds = t0.elapsed().as_secs_f64();
    let peak_bytes = if tracked { memtrack::peak_bytes() } else { 0 };
    Ok((out, PhaseProfile { seconds, peak_bytes }))
}

/// Feeds the prompt into a fresh KV cache — the generation engine's
/// prefill — and returns the cache plus the last-position distribution.
fn kv_prefill<T: Scalar>(
    view: &ModelView<T>,
    tokens: &[TokenId],
) -> Result<(KvCache<T>, Distribution<T>)> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    let cfg = view.config();
    let mut cache = KvCache::new(cfg.num_blocks, cfg.d_model);
    let mut dist = None;
    for &t in tokens {
        dist = Some(decode_step(view, &mut cache, t)?);
    }
    Ok((cache, dist.unwrap()))
}

/// Profiles the three phases on one prompt: memorize the memorization
/// prompt, prefill the inference prompt into the KV cache, then greedily
/// decode up to `max_new` tokens from that cache.
pub fn profile_run(
    params: &ModelParams<f32>,
    memorization: &TokenizedPrompt,
    inference_tokens: &[TokenId],
    config: &MemorizationConfig,
    max_new: usize,
) -> Result<ProfileReport> {
    let mut session = AdaptationSession::new(params, config.adapted_blocks)?;
    let prompts = std::slice::from_ref(memorization);
    let (_, memorize) = phase(|| session.memorize(prompts, config))?;

    let view = session.view()?;
    let ((mut cache, mut dist), prefill) = phase(|| kv_prefill(&view, inference_tokens))?;

    let (decoded, decode) = phase(|| {
        let mut tokens = Vec::new();
        for _ in 0..max_new {
            let token = dist.argmax() as TokenId;
            if token == EOT {
                break;
            }
            tokens.push(token);
            match decode_step(&view, &mut cache, token) {
                Ok(d) => dist = d,
                Err(Error::ContextOverflow { .. }) => break,
                Err(e) => return Err(e),
            }
        }
        Ok(tokens)
    })?;

    Ok(ProfileReport {
        prompt_tokens: memorization.tokens.len(),
        decoded_tokens: decoded.len(),
        memory_tracked: memtrack::is_installed(),
        memorize,
        prefill,
        decode,
    })
}

/// Baseline prefill profile of the unadapted model, for peak comparisons.
pub fn profile_prefill(params: &ModelParams<f32>, tokens: &[TokenId]) -> Result<PhaseProfile> {
    let view = ModelView::base(params);
    let (_, p) = phase(|| kv_prefill(&view, tokens))?;
    Ok(p)
}
