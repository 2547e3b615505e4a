//! Test-time memorization: adapt the feed-forward weights of the top block(s)
//! to a prompt by minimizing next-token loss plus a KL anchor to the
//! pre-adaptation predictions, leaving every other parameter frozen.

use crate::error::{Error, Result};
use crate::model::{
    backward_full, forward_full, forward_residual, forward_training, FfnOverrides,
    HiddenStateCache, ModelParams, ModelView,
};
use crate::numeric::{
    dot_f64, rmsnorm_backward_row, rmsnorm_row, silu_gate_ffn, silu_gate_ffn_backward,
    silu_gate_ffn_notrace, FfnWeights, Matrix, EPS_P,
};
use crate::scalar::Scalar;
use crate::template::TokenizedPrompt;
use crate::tokenizer::TokenId;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Loss positions per optimizer step: each epoch walks the scored positions
/// in order and takes one step per chunk of this many rows, so long prompts
/// receive proportionally more updates per epoch than short ones.
const STEP_ROWS: usize = 4;

/// Learning rates searched in the original sweep.
pub const LR_GRID: [f64; 4] = [1e-6, 3e-6, 1e-5, 3e-5];
/// Epoch counts searched in the original sweep.
pub const EPOCH_GRID: [usize; 3] = [10, 20, 50];
/// KL weights searched in the original sweep.
pub const LAMBDA_GRID: [f64; 5] = [0.01, 0.03, 0.1, 0.3, 1.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MemorizationConfig {
    pub lr: f64,
    pub epochs: usize,
    pub lambda: f64,
    /// Number of top blocks whose FFN weights are adapted.
    pub adapted_blocks: usize,
}

impl Default for MemorizationConfig {
    fn default() -> Self {
        MemorizationConfig { lr: 1e-5, epochs: 10, lambda: 0.1, adapted_blocks: 1 }
    }
}

impl MemorizationConfig {
    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive and finite"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative and finite"));
        }
        if self.adapted_blocks == 0 || self.adapted_blocks > num_blocks {
            return Err(Error::invalid(format!(
                "adapted_blocks must be in 1..={num_blocks}"
            )));
        }
        Ok(())
    }
}

/// Losses observed per epoch. Records `0..epochs` hold the training loss
/// accumulated over that epoch's steps, each chunk evaluated just before
/// its update; the final record is evaluated after the last update. When a
/// prompt fits in a single chunk, record `e` is exactly the loss after `e`
/// updates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ntp: f64,
    pub kl: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MemorizationTrace {
    pub epochs: Vec<EpochRecord>,
}

impl MemorizationTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,ntp,kl,combined\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.ntp, r.kl, r.combined));
        }
        out
    }
}

/// Frozen pre-adaptation predictions for one prompt's loss positions.
///
/// Stores the post-final-norm rows rather than full distributions so the
/// memory footprint stays proportional to `d_model`, not the vocabulary;
/// reference probabilities are recomputed from them on demand.
pub struct FrozenReference<T> {
    /// Logit-row index `t - 1` for each unmasked target position `t`.
    pub rows: Vec<usize>,
    pub targets: Vec<TokenId>,
    y_norm0: Matrix<T>,
}

impl<T: Scalar> FrozenReference<T> {
    /// Reference probability distribution for loss row `i`, in f64.
    pub fn p0_row(&self, view: &ModelView<T>, i: usize, out: &mut [f64]) {
        logits_softmax_f64(view, self.y_norm0.row(i), out);
    }
}

fn loss_positions(prompt: &TokenizedPrompt) -> Result<(Vec<usize>, Vec<TokenId>)> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for t in 1..prompt.tokens.len() {
        if prompt.loss_mask[t] {
            rows.push(t - 1);
            targets.push(prompt.tokens[t]);
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid("prompt has no unmasked loss positions"));
    }
    Ok((rows, targets))
}

/// Computes the unembedding logits of one normalized row and softmaxes them
/// into `out` (f64, length `vocab_size`).
fn logits_softmax_f64<T: Scalar>(view: &ModelView<T>, y_norm: &[T], out: &mut [f64]) {
    let unembed = &view.params.unembed;
    let mut max = f64::NEG_INFINITY;
    for (v, o) in out.iter_mut().enumerate() {
        *o = dot_f64(y_norm, unembed.row(v));
        max = max.max(*o);
    }
    let mut sum = 0.0f64;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Per-prompt state prepared once per memorization call: tokens, the cached
/// hidden states of the last block, and the frozen reference.
pub struct PromptState<T> {
    pub tokens: Vec<TokenId>,
    pub cache: HiddenStateCache<T>,
    pub frozen: FrozenReference<T>,
}

impl<T: Scalar> PromptState<T> {
    pub fn prepare(view: &ModelView<T>, prompt: &TokenizedPrompt) -> Result<Self> {
        let (rows, targets) = loss_positions(prompt)?;
        let (y, cache) = forward_residual(view, &prompt.tokens)?;
        let cfg = view.config();
        let mut y_norm0 = Matrix::zeros(rows.len(), cfg.d_model);
        for (i, &r) in rows.iter().enumerate() {
            rmsnorm_row(y.row(r), &view.params.final_norm, cfg.norm_eps, y_norm0.row_mut(i));
        }
        Ok(PromptState {
            tokens: prompt.tokens.clone(),
            cache,
            frozen: FrozenReference { rows, targets, y_norm0 },
        })
    }
}

/// Output of one gradient evaluation: FFN gradients for the adapted blocks
/// (bottom-most adapted block first) and the summed losses.
pub struct GradEval<T> {
    pub ffn_grads: Vec<FfnWeights<T>>,
    pub ntp: f64,
    pub kl: f64,
}

/// Fast path for a single adapted block: re-runs only the last FFN sublayer
/// and the readout on the cached hidden states, streaming one position at a
/// time so no sequence-by-vocabulary matrix is ever materialized.
pub fn fast_path_gradients<T: Scalar>(
    view: &ModelView<T>,
    state: &PromptState<T>,
    lambda: f64,
) -> Result<GradEval<T>> {
    let span = 0..state.frozen.rows.len();
    fast_path_eval(view, state, lambda, true, span).map(|(g, ntp, kl)| GradEval {
        ffn_grads: vec![g.expect("gradients requested")],
        ntp,
        kl,
    })
}

/// Losses of the fast path without any backward work.
pub fn fast_path_losses<T: Scalar>(
    view: &ModelView<T>,
    state: &PromptState<T>,
    lambda: f64,
) -> Result<(f64, f64)> {
    let span = 0..state.frozen.rows.len();
    fast_path_eval(view, state, lambda, false, span).map(|(_, ntp, kl)| (ntp, kl))
}

/// Fast-path evaluation restricted to the loss rows `span` (indices into
/// `state.frozen.rows`). Only those rows are normalized, run through the
/// adapted FFN, and read out, so the cost of a chunk is proportional to its
/// size.
fn fast_path_eval<T: Scalar>(
    view: &ModelView<T>,
    state: &PromptState<T>,
    lambda: f64,
    want_grads: bool,
    span: Range<usize>,
) -> Result<(Option<FfnWeights<T>>, f64, f64)> {
    let cfg = view.config();
    let d = cfg.d_model;
    let vocab = cfg.vocab_size;
    let last = cfg.num_blocks - 1;
    let block = &view.params.blocks[last];
    let weights = view.ffn(last);
    let frozen = &state.frozen;
    let rows_sub = &frozen.rows[span.clone()];

    let mut h_norm = Matrix::zeros(rows_sub.len(), d);
    for (j, &row) in rows_sub.iter().enumerate() {
        rmsnorm_row(state.cache.hidden.row(row), &block.ffn_norm, cfg.norm_eps, h_norm.row_mut(j));
    }
    // Losses-only callers skip the trace so full-span evaluations do not
    // hold sequence-by-d_ff activations.
    let (ffn_out, trace) = if want_grads {
        let (o, t) = silu_gate_ffn(&h_norm, weights)?;
        (o, Some(t))
    } else {
        (silu_gate_ffn_notrace(&h_norm, weights)?, None)
    };

    let mut dy = want_grads.then(|| Matrix::<T>::zeros(rows_sub.len(), d));
    let mut ntp = 0.0f64;
    let mut kl = 0.0f64;
    let mut q = vec![0.0f64; vocab];
    let mut p0 = vec![0.0f64; vocab];
    let mut y_row = vec![T::zero(); d];
    let mut y_norm_row = vec![T::zero(); d];
    let mut d_logits = vec![0.0f64; vocab];
    let mut dy_norm = vec![0.0f64; d];
    let mut dgain_scratch = vec![T::zero(); d];
    let unembed = &view.params.unembed;

    for (j, &row) in rows_sub.iter().enumerate() {
        let i = span.start + j;
        let hidden = state.cache.hidden.row(row);
        let f = ffn_out.row(j);
        for c in 0..d {
            y_row[c] = hidden[c] + f[c];
        }
        rmsnorm_row(&y_row, &view.params.final_norm, cfg.norm_eps, &mut y_norm_row);
        logits_softmax_f64(view, &y_norm_row, &mut q);
        frozen.p0_row(view, i, &mut p0);
        let target = frozen.targets[i] as usize;
        ntp -= q[target].max(EPS_P).ln();
        let mut kl_row = 0.0f64;
        for v in 0..vocab {
            if p0[v] > 0.0 {
                kl_row += p0[v] * (p0[v].max(EPS_P).ln() - q[v].max(EPS_P).ln());
            }
        }
        kl += kl_row;

        if let Some(dy) = dy.as_mut() {
            // d(ntp + lambda*kl)/dlogits = (1+lambda) q - onehot - lambda p0
            for v in 0..vocab {
                d_logits[v] = (1.0 + lambda) * q[v] - lambda * p0[v];
            }
            d_logits[target] -= 1.0;
            // dy_norm = d_logits^T unembed
            dy_norm[..d].fill(0.0);
            for v in 0..vocab {
                let dl = d_logits[v];
                let urow = unembed.row(v);
                for c in 0..d {
                    dy_norm[c] += dl * urow[c].to_f64s();
                }
            }
            let dyn_t: Vec<T> = dy_norm[..d].iter().map(|&x| T::from_f64(x)).collect();
            dgain_scratch.fill(T::zero());
            rmsnorm_backward_row(
                &y_row,
                &view.params.final_norm,
                cfg.norm_eps,
                &dyn_t,
                dy.row_mut(j),
                &mut dgain_scratch,
            );
        }
    }

    let grads = if let Some(dy) = dy {
        // y = hidden + ffn(h_norm): the FFN output gradient is dy directly.
        let g = silu_gate_ffn_backward(&h_norm, weights, trace.as_ref().unwrap(), &dy, false)?;
        Some(g.weights)
    } else {
        None
    };
    Ok((grads, ntp, kl))
}

/// Builds the full per-position logit gradient for the combined loss. Rows
/// whose successor token is masked are exactly zero.
pub fn loss_logit_grads<T: Scalar>(
    view: &ModelView<T>,
    logits: &Matrix<T>,
    frozen: &FrozenReference<T>,
    lambda: f64,
) -> Result<(Matrix<T>, f64, f64)> {
    loss_logit_grads_span(view, logits, frozen, lambda, 0..frozen.rows.len())
}

/// As [`loss_logit_grads`], restricted to the loss rows `span` (indices
/// into `frozen.rows`); rows outside the span stay exactly zero.
fn loss_logit_grads_span<T: Scalar>(
    view: &ModelView<T>,
    logits: &Matrix<T>,
    frozen: &FrozenReference<T>,
    lambda: f64,
    span: Range<usize>,
) -> Result<(Matrix<T>, f64, f64)> {
    let vocab = view.config().vocab_size;
    let mut d_logits = Matrix::zeros(logits.rows(), vocab);
    let mut q = vec![0.0f64; vocab];
    let mut p0 = vec![0.0f64; vocab];
    let mut ntp = 0.0f64;
    let mut kl = 0.0f64;
    for i in span {
        let row = frozen.rows[i];
        let lr_ = logits.row(row);
        let mut max = f64::NEG_INFINITY;
        for (v, o) in q.iter_mut().enumerate() {
            *o = lr_[v].to_f64s();
            max = max.max(*o);
        }
        let mut sum = 0.0f64;
        for o in q.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        for o in q.iter_mut() {
            *o /= sum;
        }
        frozen.p0_row(view, i, &mut p0);
        let target = frozen.targets[i] as usize;
        ntp -= q[target].max(EPS_P).ln();
        for v in 0..vocab {
            if p0[v] > 0.0 {
                kl += p0[v] * (p0[v].max(EPS_P).ln() - q[v].max(EPS_P).ln());
            }
        }
        let out = d_logits.row_mut(row);
        for v in 0..vocab {
            out[v] = T::from_f64((1.0 + lambda) * q[v] - lambda * p0[v]);
        }
        out[target] += T::from_f64(-1.0);
    }
    Ok((d_logits, ntp, kl))
}

/// Reference path: full forward/backward through the whole network, keeping
/// only the FFN gradients of the adapted blocks. Works for any number of
/// adapted blocks; the fast path must agree with it when one block is
/// adapted.
pub fn full_path_gradients<T: Scalar>(
    view: &ModelView<T>,
    state: &PromptState<T>,
    lambda: f64,
    adapted_blocks: usize,
) -> Result<GradEval<T>> {
    full_path_gradients_span(view, state, lambda, adapted_blocks, 0..state.frozen.rows.len())
}

fn full_path_gradients_span<T: Scalar>(
    view: &ModelView<T>,
    state: &PromptState<T>,
    lambda: f64,
    adapted_blocks: usize,
    span: Range<usize>,
) -> Result<GradEval<T>> {
    let trace = forward_training(view, &state.tokens)?;
    let (d_logits, ntp, kl) =
        loss_logit_grads_span(view, &trace.logits, &state.frozen, lambda, span)?;
    let grads = backward_full(view, &trace, &state.tokens, &d_logits)?;
    let k = view.config().num_blocks;
    let ffn_grads = grads.blocks[k - adapted_blocks..]
        .iter()
        .map(|b| b.ffn.clone())
        .collect();
    Ok(GradEval { ffn_grads, ntp, kl })
}

/// Adam moments kept in the model's own precision so the optimizer state
/// stays a small constant factor of the adapted weights.
struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> AdamState<T> {
    fn new(n: usize) -> Self {
        AdamState { m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    fn step(&mut self, lr: f64, params: &mut FfnWeights<T>, grads: &FfnWeights<T>) {
        self.t += 1;
        // The whole update runs in the model's own precision: the moments
        // are stored in T anyway, and the per-parameter work is the hot
        // loop of every optimizer step.
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let c1 = T::from_f64(1.0 - ADAM_BETA1);
        let c2 = T::from_f64(1.0 - ADAM_BETA2);
        let inv_bc1 = T::from_f64(1.0 / (1.0 - ADAM_BETA1.powi(self.t as i32)));
        let inv_bc2 = T::from_f64(1.0 / (1.0 - ADAM_BETA2.powi(self.t as i32)));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(ADAM_EPS);
        let mut off = 0usize;
        for (ps, gs) in params.param_blocks_mut().into_iter().zip(grads.param_blocks()) {
            let n = ps.len();
            let ms = &mut self.m[off..off + n];
            let vs = &mut self.v[off..off + n];
            for j in 0..n {
                let g = gs[j];
                let mi = b1 * ms[j] + c1 * g;
                let vi = b2 * vs[j] + c2 * g * g;
                ms[j] = mi;
                vs[j] = vi;
                ps[j] = ps[j] - lr_t * (mi * inv_bc1) / ((vi * inv_bc2).sqrt() + eps);
            }
            off += n;
        }
    }
}

/// An in-place adaptation of a frozen base model. Holds copies of the
/// adapted FFN weights; the base parameters are never written, so dropping
/// or restoring the session leaves the model bit-identical to before.
pub struct AdaptationSession<'a, T> {
    params: &'a ModelParams<T>,
    overrides: FfnOverrides<T>,
    live: bool,
    /// True once a memorize call has changed the overrides; a clean session
    /// can roll back by re-copying from the base instead of holding a
    /// standing clone of the adapted weights.
    dirty: bool,
}

impl<'a, T: Scalar> AdaptationSession<'a, T> {
    pub fn new(params: &'a ModelParams<T>, adapted_blocks: usize) -> Result<Self> {
        let k = params.config.num_blocks;
        if adapted_blocks == 0 || adapted_blocks > k {
            return Err(Error::invalid(format!("adapted_blocks must be in 1..={k}")));
        }
        Ok(AdaptationSession {
            overrides: FfnOverrides::copy_top_n(params, adapted_blocks),
            params,
            live: true,
            dirty: false,
        })
    }

    fn check_live(&self) -> Result<()> {
        if self.live {
            Ok(())
        } else {
            Err(Error::StaleSession)
        }
    }

    pub fn adapted_blocks(&self) -> usize {
        self.overrides.ffns.len()
    }

    /// Model view with the adapted weights in effect.
    pub fn view(&self) -> Result<ModelView<'_, T>> {
        self.check_live()?;
        Ok(ModelView::adapted(self.params, &self.overrides))
    }

    /// The untouched base model.
    pub fn base_view(&self) -> ModelView<'_, T> {
        ModelView::base(self.params)
    }

    /// Ends the session. Any later use returns [`Error::StaleSession`]; the
    /// base model was never modified.
    pub fn restore(&mut self) -> Result<()> {
        self.check_live()?;
        self.live = false;
        Ok(())
    }

    /// Memorizes a batch of prompts: gradient steps on the adapted FFN
    /// weights against the summed next-token loss plus `lambda` times the
    /// KL between the pre-adaptation and current predictions, averaged over
    /// the batch. Aborts and rolls back if the loss diverges.
    pub fn memorize(
        &mut self,
        prompts: &[TokenizedPrompt],
        config: &MemorizationConfig,
    ) -> Result<MemorizationTrace> {
        self.check_live()?;
        config.validate(self.params.config.num_blocks)?;
        if config.adapted_blocks != self.adapted_blocks() {
            return Err(Error::invalid(format!(
                "session adapts {} block(s) but config asks for {}",
                self.adapted_blocks(),
                config.adapted_blocks
            )));
        }
        if prompts.is_empty() {
            return Err(Error::invalid("empty prompt batch"));
        }
        let batch = prompts.len() as f64;
        let fast = self.adapted_blocks() == 1;

        // The frozen reference and (on the fast path) hidden-state caches
        // are computed against the session state at call time. The rollback
        // copy is cloned afterwards to keep the allocation high-water mark
        // of the preparation forward passes low.
        let states = prompts
            .iter()
            .map(|p| PromptState::prepare(&self.view()?, p))
            .collect::<Result<Vec<_>>>()?;
        let mut rollback: Option<FfnOverrides<T>> = self.dirty.then(|| self.overrides.clone());

        let n_adapted = self.adapted_blocks();
        let mut adam: Vec<AdamState<T>> = self
            .overrides
            .ffns
            .iter()
            .map(|f| AdamState::new(f.param_count()))
            .collect();
        let mut trace = MemorizationTrace::default();
        let mut baseline = f64::INFINITY;
        let max_chunks = states
            .iter()
            .map(|s| s.frozen.rows.len().div_ceil(STEP_ROWS))
            .max()
            .unwrap_or(1);

        for epoch in 0..=config.epochs {
            let mut ntp = 0.0f64;
            let mut kl = 0.0f64;
            if epoch == config.epochs {
                // Final record: losses after the last update, no step.
                let view = ModelView::adapted(self.params, &self.overrides);
                for state in &states {
                    let (n, k) = if fast {
                        fast_path_losses(&view, state, config.lambda)?
                    } else {
                        let trace_f = forward_training(&view, &state.tokens)?;
                        let (_, n, k) =
                            loss_logit_grads(&view, &trace_f.logits, &state.frozen, config.lambda)?;
                        (n, k)
                    };
                    ntp += n;
                    kl += k;
                }
            } else {
                // Per-prompt loss accumulators: summing each prompt's chunks
                // first keeps the epoch total independent of how prompts
                // interleave across chunks.
                let mut ntp_per = vec![0.0f64; states.len()];
                let mut kl_per = vec![0.0f64; states.len()];
                for chunk in 0..max_chunks {
                    let start = chunk * STEP_ROWS;
                    let mut grads: Option<Vec<FfnWeights<T>>> = None;
                    let mut contributing = 0usize;
                    for (s, state) in states.iter().enumerate() {
                        let n_rows = state.frozen.rows.len();
                        if start >= n_rows {
                            continue;
                        }
                        let span = start..n_rows.min(start + STEP_ROWS);
                        contributing += 1;
                        let view = ModelView::adapted(self.params, &self.overrides);
                        let eval = if fast {
                            let (g, n, k) =
                                fast_path_eval(&view, state, config.lambda, true, span)?;
                            GradEval {
                                ffn_grads: vec![g.expect("gradients requested")],
                                ntp: n,
                                kl: k,
                            }
                        } else {
                            full_path_gradients_span(&view, state, config.lambda, n_adapted, span)?
                        };
                        ntp_per[s] += eval.ntp;
                        kl_per[s] += eval.kl;
                        match grads.as_mut() {
                            None => grads = Some(eval.ffn_grads),
                            Some(acc) => {
                                for (a, g) in acc.iter_mut().zip(&eval.ffn_grads) {
                                    a.w_gate.add_assign(&g.w_gate);
                                    a.w_up.add_assign(&g.w_up);
                                    a.w_down.add_assign(&g.w_down);
                                    for (x, y) in a.b_gate.iter_mut().zip(&g.b_gate) {
                                        *x += *y;
                                    }
                                    for (x, y) in a.b_up.iter_mut().zip(&g.b_up) {
                                        *x += *y;
                                    }
                                    for (x, y) in a.b_down.iter_mut().zip(&g.b_down) {
                                        *x += *y;
                                    }
                                }
                            }
                        }
                    }
                    let Some(mut gs) = grads else { continue };
                    let scale = T::from_f64(1.0 / contributing as f64);
                    for ((g, w), a) in gs
                        .iter_mut()
                        .zip(self.overrides.ffns.iter_mut())
                        .zip(adam.iter_mut())
                    {
                        g.for_each_param_mut(|v| *v = *v * scale);
                        a.step(config.lr, w, g);
                    }
                }
                let finite = self
                    .overrides
                    .ffns
                    .iter()
                    .all(|f| f.iter_params().all(|v| v.is_finite()));
                if !finite {
                    self.overrides = rollback
                    .take()
                    .unwrap_or_else(|| FfnOverrides::copy_top_n(self.params, n_adapted));
                    return Err(Error::NumericalDivergence(format!(
                        "adapted weights became non-finite during epoch {epoch}; \
                         adaptation rolled back"
                    )));
                }
                ntp = ntp_per.iter().sum();
                kl = kl_per.iter().sum();
            }
            ntp /= batch;
            kl /= batch;
            let combined = ntp + config.lambda * kl;
            trace.epochs.push(EpochRecord { epoch, ntp, kl, combined });
            if epoch == 0 {
                baseline = combined;
            }
            if !combined.is_finite() || combined > 10.0 * baseline.max(1e-12) {
                self.overrides = rollback
                    .take()
                    .unwrap_or_else(|| FfnOverrides::copy_top_n(self.params, n_adapted));
                return Err(Error::NumericalDivergence(format!(
                    "combined loss {combined} at epoch {epoch} (baseline {baseline}); \
                     adaptation rolled back"
                )));
            }
        }
        self.dirty = true;
        Ok(trace)
    }
}

/// Summed next-token loss and loss-position count for a prompt under `view`.
pub fn ntp_stats<T: Scalar>(view: &ModelView<T>, prompt: &TokenizedPrompt) -> Result<(f64, usize)> {
    let (rows, targets) = loss_positions(prompt)?;
    let (logits, _) = forward_full(view, &prompt.tokens, false)?;
    let mut sum = 0.0f64;
    let mut q = vec![0.0f64; view.config().vocab_size];
    for (&row, &target) in rows.iter().zip(&targets) {
        let lr_ = logits.row(row);
        let mut max = f64::NEG_INFINITY;
        for (v, o) in q.iter_mut().enumerate() {
            *o = lr_[v].to_f64s();
            max = max.max(*o);
        }
        let mut s = 0.0f64;
        for o in q.iter_mut() {
            *o = (*o - max).exp();
            s += *o;
        }
        sum -= (q[target as usize] / s).max(EPS_P).ln();
    }
    Ok((sum, rows.len()))
}

/// Perplexity over the unmasked positions of a prompt.
pub fn perplexity<T: Scalar>(view: &ModelView<T>, prompt: &TokenizedPrompt) -> Result<f64> {
    let (sum, count) = ntp_stats(view, prompt)?;
    Ok((sum / count as f64).exp())
}
