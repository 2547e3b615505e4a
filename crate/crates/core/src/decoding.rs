//! Greedy decoding plus the contrastive variants: adapted-vs-base contrast,
//! early-exit layer contrast, and context-vs-no-context contrast.

use crate::error::{Error, Result};
use crate::model::{decode_step, decode_step_with_exits, KvCache, ModelView};
use crate::numeric::{js_divergence, stable_softmax, Distribution, EPS_P};
use crate::scalar::Scalar;
use crate::tokenizer::{TokenId, EOT};
use serde::{Deserialize, Serialize};

/// Contrast strengths searched in the original sweep.
pub const ALPHA_GRID: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastConfig {
    /// Contrast strength for the amateur/base distribution.
    pub alpha: f64,
    /// Head-token threshold: only tokens with final probability at least
    /// `beta` times the maximum stay candidates in layer contrast.
    pub beta: f64,
    /// Candidate early-exit layers (1-based). Empty means every layer below
    /// the top.
    pub candidate_layers: Vec<usize>,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig { alpha: 1.0, beta: 0.1, candidate_layers: Vec::new() }
    }
}

impl ContrastConfig {
    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid("alpha must be non-negative and finite"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid("beta must be in (0, 1]"));
        }
        if self.candidate_layers.iter().any(|&k| k == 0 || k >= num_blocks) {
            return Err(Error::invalid(format!(
                "candidate layers must be in 1..{num_blocks}"
            )));
        }
        Ok(())
    }

    pub fn layers_or_default(&self, num_blocks: usize) -> Vec<usize> {
        if self.candidate_layers.is_empty() {
            (1..num_blocks).collect()
        } else {
            self.candidate_layers.clone()
        }
    }
}

/// Expert-vs-amateur contrast:
/// `softmax((1 + alpha) log p_expert - alpha log p_amateur)`.
pub fn cd_distribution<T: Scalar>(
    expert: &Distribution<T>,
    amateur: &Distribution<T>,
    alpha: f64,
) -> Result<Distribution<T>> {
    if expert.len() != amateur.len() {
        return Err(Error::invalid("contrast distributions differ in length"));
    }
    let logits: Vec<T> = expert
        .probs()
        .iter()
        .zip(amateur.probs())
        .map(|(&e, &a)| {
            let le = e.to_f64s().max(EPS_P).ln();
            let la = a.to_f64s().max(EPS_P).ln();
            T::from_f64((1.0 + alpha) * le - alpha * la)
        })
        .collect();
    stable_softmax(&logits)
}

/// Layer contrast: picks the candidate layer whose distribution is farthest
/// (Jensen-Shannon divergence) from the final one — ties go to the smallest
/// layer — then contrasts against it over the head tokens only.
///
/// Returns the contrasted distribution and the selected layer.
pub fn dola_distribution<T: Scalar>(
    final_dist: &Distribution<T>,
    early: &[(usize, Distribution<T>)],
    beta: f64,
) -> Result<(Distribution<T>, usize)> {
    if early.is_empty() {
        return Err(Error::invalid("no candidate early-exit layers"));
    }
    let mut best_k = 0usize;
    let mut best_jsd = f64::NEG_INFINITY;
    for (k, dist) in early {
        let jsd = js_divergence(final_dist, dist)?;
        if jsd > best_jsd || (jsd == best_jsd && *k < best_k) {
            best_jsd = jsd;
            best_k = *k;
        }
    }
    let premature = &early.iter().find(|(k, _)| *k == best_k).unwrap().1;

    let pf = final_dist.probs();
    let max = pf[final_dist.argmax()].to_f64s();
    let threshold = beta * max;
    // Softmax of log(p_final/p_early) restricted to the head tokens; tail
    // tokens get exactly zero.
    let mut logits = vec![0.0f64; pf.len()];
    let mut head_max = f64::NEG_INFINITY;
    let mut any_head = false;
    for (v, (&f, &e)) in pf.iter().zip(premature.probs()).enumerate() {
        let fv = f.to_f64s();
        if fv >= threshold {
            logits[v] = fv.max(EPS_P).ln() - e.to_f64s().max(EPS_P).ln();
            head_max = head_max.max(logits[v]);
            any_head = true;
        } else {
            logits[v] = f64::NEG_INFINITY;
        }
    }
    debug_assert!(any_head, "the argmax token always clears the threshold");
    let mut sum = 0.0f64;
    for l in logits.iter_mut() {
        *l = if l.is_finite() { (*l - head_max).exp() } else { 0.0 };
        sum += *l;
    }
    let probs: Vec<T> = logits.into_iter().map(|p| T::from_f64(p / sum)).collect();
    Ok((Distribution::new(probs)?, best_k))
}

/// How the next-token distribution is produced at each step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "strategy")]
pub enum DecodeStrategy {
    /// Argmax of the (possibly adapted) model.
    Greedy,
    /// Contrast the adapted model against the frozen base model.
    Contrast,
    /// Contrast the final layer against a dynamically chosen early layer.
    LayerContrast,
    /// Contrast the full prompt against a context-free prompt.
    ContextContrast,
}

/// One decode step, as written to the step log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub step: usize,
    pub token: TokenId,
    /// Selected early-exit layer, when layer contrast is active.
    pub k_star: Option<usize>,
    /// Top five (token, probability) pairs of the sampling distribution.
    pub top: Vec<(TokenId, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct DecodeOutput {
    /// Newly generated tokens, excluding the prompt and any trailing
    /// end-of-text token.
    pub tokens: Vec<TokenId>,
    pub steps: Vec<DecodeRecord>,
}

fn top_n<T: Scalar>(dist: &Distribution<T>, n: usize) -> Vec<(TokenId, f64)> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| {
        dist.probs()[b]
            .partial_cmp(&dist.probs()[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.into_iter()
        .take(n)
        .map(|i| (i as TokenId, dist.probs()[i].to_f64s()))
        .collect()
}

fn feed_prompt<T: Scalar>(
    view: &ModelView<T>,
    cache: &mut KvCache<T>,
    prompt: &[TokenId],
) -> Result<Distribution<T>> {
    if prompt.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    let mut last = None;
    for &t in prompt {
        last = Some(decode_step(view, cache, t)?);
    }
    Ok(last.unwrap())
}

fn run_loop<T: Scalar>(
    max_new: usize,
    mut next: impl FnMut(Option<TokenId>) -> Result<(Distribution<T>, Option<usize>)>,
) -> Result<DecodeOutput> {
    let mut out = DecodeOutput::default();
    let (mut dist, mut k_star) = next(None)?;
    for step in 0..max_new {
        let token = dist.argmax() as TokenId;
        out.steps.push(DecodeRecord { step, token, k_star, top: top_n(&dist, 5) });
        if token == EOT {
            break;
        }
        out.tokens.push(token);
        if step + 1 == max_new {
            break;
        }
        match next(Some(token)) {
            Ok((d, k)) => {
                dist = d;
                k_star = k;
            }
            Err(Error::ContextOverflow { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Greedy decoding under a single view.
pub fn greedy_decode<T: Scalar>(
    view: &ModelView<T>,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<DecodeOutput> {
    let cfg = view.config();
    let mut cache = KvCache::new(cfg.num_blocks, cfg.d_model);
    run_loop(max_new, |prev| match prev {
        None => Ok((feed_prompt(view, &mut cache, prompt)?, None)),
        Some(t) => Ok((decode_step(view, &mut cache, t)?, None)),
    })
}

/// Contrastive decoding of an adapted expert against its frozen base.
pub fn cd_decode<T: Scalar>(
    expert: &ModelView<T>,
    amateur: &ModelView<T>,
    prompt: &[TokenId],
    max_new: usize,
    alpha: f64,
) -> Result<DecodeOutput> {
    let cfg = expert.config();
    let mut cache_e = KvCache::new(cfg.num_blocks, cfg.d_model);
    let mut cache_a = KvCache::new(cfg.num_blocks, cfg.d_model);
    run_loop(max_new, |prev| {
        let (de, da) = match prev {
            None => (
                feed_prompt(expert, &mut cache_e, prompt)?,
                feed_prompt(amateur, &mut cache_a, prompt)?,
            ),
            Some(t) => (
                decode_step(expert, &mut cache_e, t)?,
                decode_step(amateur, &mut cache_a, t)?,
            ),
        };
        Ok((cd_distribution(&de, &da, alpha)?, None))
    })
}

/// Layer-contrast decoding under a single view.
pub fn dola_decode<T: Scalar>(
    view: &ModelView<T>,
    prompt: &[TokenId],
    max_new: usize,
    config: &ContrastConfig,
) -> Result<DecodeOutput> {
    let cfg = view.config();
    config.validate(cfg.num_blocks)?;
    let layers = config.layers_or_default(cfg.num_blocks);
    let mut cache = KvCache::new(cfg.num_blocks, cfg.d_model);
    let step = |cache: &mut KvCache<T>, t: TokenId| -> Result<(Distribution<T>, Option<usize>)> {
        let (final_dist, exits) = decode_step_with_exits(view, cache, t, &layers)?;
        let early: Vec<(usize, Distribution<T>)> =
            layers.iter().copied().zip(exits).collect();
        let (dist, k_star) = dola_distribution(&final_dist, &early, config.beta)?;
        Ok((dist, Some(k_star)))
    };
    run_loop(max_new, |prev| match prev {
        None => {
            if prompt.is_empty() {
                return Err(Error::invalid("empty prompt"));
            }
            let mut out = None;
            for &t in prompt {
                out = Some(step(&mut cache, t)?);
            }
            Ok(out.unwrap())
        }
        Some(t) => step(&mut cache, t),
    })
}

/// Context-aware contrast: the same model decodes a prompt with the
/// reference context and one without it; the two streams share the
/// generated continuation.
pub fn cad_decode<T: Scalar>(
    view: &ModelView<T>,
    prompt_with_context: &[TokenId],
    prompt_without_context: &[TokenId],
    max_new: usize,
    alpha: f64,
) -> Result<DecodeOutput> {
    let cfg = view.config();
    let mut cache_c = KvCache::new(cfg.num_blocks, cfg.d_model);
    let mut cache_p = KvCache::new(cfg.num_blocks, cfg.d_model);
    run_loop(max_new, |prev| {
        let (dc, dp) = match prev {
            None => (
                feed_prompt(view, &mut cache_c, prompt_with_context)?,
                feed_prompt(view, &mut cache_p, prompt_without_context)?,
            ),
            Some(t) => (
                decode_step(view, &mut cache_c, t)?,
                decode_step(view, &mut cache_p, t)?,
            ),
        };
        Ok((cd_distribution(&dc, &dp, alpha)?, None))
    })
}

/// Serializes decode steps as one JSON object per line.
pub fn steps_to_jsonl(steps: &[DecodeRecord]) -> Result<String> {
    let mut out = String::new();
    for s in steps {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}
