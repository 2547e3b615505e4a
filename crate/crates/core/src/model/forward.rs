use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelView};
use crate::numeric::{
    rmsnorm, silu_gate_ffn, silu_gate_ffn_notrace, stable_softmax, Distribution, FfnTrace, Matrix, matmul_nt,
};
use crate::scalar::Scalar;
use crate::tokenizer::TokenId;

pub(crate) const ROPE_BASE: f64 = 10000.0;

/// Rotates the (2i, 2i+1) pairs of every head slice by the position angle.
/// `sign` is +1 in the forward pass and -1 when transposing the rotation
/// in the backward pass.
pub(crate) fn rope_apply<T: Scalar>(
    row: &mut [T],
    pos: usize,
    n_heads: usize,
    head_dim: usize,
    sign: f64,
) {
    for h in 0..n_heads {
        let base = h * head_dim;
        for i in 0..head_dim / 2 {
            let theta =
                sign * pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = theta.sin_cos();
            let a = row[base + 2 * i].to_f64s();
            let b = row[base + 2 * i + 1].to_f64s();
            row[base + 2 * i] = T::from_f64(a * cos - b * sin);
            row[base + 2 * i + 1] = T::from_f64(a * sin + b * cos);
        }
    }
}

/// Causal multi-head attention over full q/k/v matrices (post-rope).
/// Returns the concatenated head outputs; per-head probability rows are
/// stored only when a trace is requested.
pub(crate) fn causal_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    n_heads: usize,
    head_dim: usize,
    want_probs: bool,
) -> (Matrix<T>, Option<Vec<Matrix<T>>>) {
    let t_len = q.rows();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut cat = Matrix::zeros(t_len, n_heads * head_dim);
    let mut probs: Option<Vec<Matrix<T>>> =
        want_probs.then(|| (0..n_heads).map(|_| Matrix::zeros(t_len, t_len)).collect());
    let mut scores = vec![0.0f64; t_len];
    for h in 0..n_heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        for i in 0..t_len {
            let qi = &q.row(i)[lo..hi];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k.row(j)[lo..hi];
                let mut s = 0.0f64;
                for c in 0..head_dim {
                    s += qi[c].to_f64s() * kj[c].to_f64s();
                }
                scores[j] = s * scale;
                max = max.max(scores[j]);
            }
            let mut sum = 0.0f64;
            for s in scores[..=i].iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let mut acc = vec![0.0f64; head_dim];
            for j in 0..=i {
                let p = scores[j] / sum;
                if let Some(ps) = probs.as_mut() {
                    ps[h].set(i, j, T::from_f64(p));
                }
                let vj = &v.row(j)[lo..hi];
                for c in 0..head_dim {
                    acc[c] += p * vj[c].to_f64s();
                }
            }
            let out = &mut cat.row_mut(i)[lo..hi];
            for c in 0..head_dim {
                out[c] = T::from_f64(acc[c]);
            }
        }
    }
    (cat, probs)
}

/// Per-position attention-sublayer outputs of the last block: everything
/// needed to recompute the final FFN sublayer and the readout above it.
#[derive(Debug, Clone)]
pub struct HiddenStateCache<T> {
    /// Residual stream right after the last block's attention sublayer,
    /// i.e. the input to the last FFN sublayer. One row per position.
    pub hidden: Matrix<T>,
}

/// Activations of one block kept for the backward pass.
pub struct BlockTrace<T> {
    pub x_in: Matrix<T>,
    pub x_norm: Matrix<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub probs: Vec<Matrix<T>>,
    pub attn_cat: Matrix<T>,
    pub h: Matrix<T>,
    pub h_norm: Matrix<T>,
    pub ffn_trace: FfnTrace<T>,
}

pub struct ForwardTrace<T> {
    pub blocks: Vec<BlockTrace<T>>,
    pub y_final: Matrix<T>,
    pub y_norm: Matrix<T>,
    pub logits: Matrix<T>,
}

fn check_tokens(config: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if tokens.len() > config.context_window {
        return Err(Error::ContextOverflow {
            needed: tokens.len(),
            window: config.context_window,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {bad} out of range for vocabulary {}",
            config.vocab_size
        )));
    }
    Ok(())
}

fn embed_tokens<T: Scalar>(view: &ModelView<T>, tokens: &[TokenId]) -> Matrix<T> {
    let d = view.config().d_model;
    let mut x = Matrix::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(view.params.embed.row(t as usize));
    }
    x
}

struct BlockOut<T> {
    y: Matrix<T>,
    h: Matrix<T>,
    trace: Option<BlockTrace<T>>,
}

fn block_forward<T: Scalar>(
    view: &ModelView<T>,
    b_idx: usize,
    x: Matrix<T>,
    want_trace: bool,
) -> Result<BlockOut<T>> {
    let cfg = view.config();
    let block = &view.params.blocks[b_idx];
    let x_norm = rmsnorm(&x, &block.attn_norm, cfg.norm_eps);
    let mut q = matmul_nt(&x_norm, &block.wq)?;
    let mut k = matmul_nt(&x_norm, &block.wk)?;
    let v = matmul_nt(&x_norm, &block.wv)?;
    for i in 0..q.rows() {
        rope_apply(q.row_mut(i), i, cfg.n_heads, cfg.head_dim(), 1.0);
        rope_apply(k.row_mut(i), i, cfg.n_heads, cfg.head_dim(), 1.0);
    }
    if !want_trace {
        // Inference path: drop intermediates as soon as they are consumed
        // and run the FFN tiled, keeping the transient footprint small.
        drop(x_norm);
        let (attn_cat, _) = causal_attention(&q, &k, &v, cfg.n_heads, cfg.head_dim(), false);
        drop((q, k, v));
        let attn_out = matmul_nt(&attn_cat, &block.wo)?;
        drop(attn_cat);
        let mut h = x;
        h.add_assign(&attn_out);
        drop(attn_out);
        let h_norm = rmsnorm(&h, &block.ffn_norm, cfg.norm_eps);
        let ffn_out = silu_gate_ffn_notrace(&h_norm, view.ffn(b_idx))?;
        drop(h_norm);
        let mut y = h.clone();
        y.add_assign(&ffn_out);
        return Ok(BlockOut { y, h, trace: None });
    }
    let (attn_cat, probs) = causal_attention(&q, &k, &v, cfg.n_heads, cfg.head_dim(), true);
    let attn_out = matmul_nt(&attn_cat, &block.wo)?;
    let mut h = x.clone();
    h.add_assign(&attn_out);
    let h_norm = rmsnorm(&h, &block.ffn_norm, cfg.norm_eps);
    let (ffn_out, ffn_trace) = silu_gate_ffn(&h_norm, view.ffn(b_idx))?;
    let mut y = h.clone();
    y.add_assign(&ffn_out);
    let trace = Some(BlockTrace {
        x_in: x,
        x_norm,
        q,
        k,
        v,
        probs: probs.unwrap_or_default(),
        attn_cat,
        h: h.clone(),
        h_norm,
        ffn_trace,
    });
    Ok(BlockOut { y, h, trace })
}

fn readout<T: Scalar>(view: &ModelView<T>, y: &Matrix<T>) -> Result<Matrix<T>> {
    let y_norm = rmsnorm(y, &view.params.final_norm, view.config().norm_eps);
    matmul_nt(&y_norm, &view.params.unembed)
}

/// Runs all blocks and returns the final residual stream (pre final-norm)
/// together with the last block's post-attention hidden states.
pub fn forward_residual<T: Scalar>(
    view: &ModelView<T>,
    tokens: &[TokenId],
) -> Result<(Matrix<T>, HiddenStateCache<T>)> {
    let cfg = view.config();
    check_tokens(cfg, tokens)?;
    let mut x = embed_tokens(view, tokens);
    let mut hidden = None;
    let last = cfg.num_blocks - 1;
    for b in 0..cfg.num_blocks {
        let out = block_forward(view, b, x, false)?;
        if b == last {
            hidden = Some(out.h);
        }
        x = out.y;
    }
    Ok((x, HiddenStateCache { hidden: hidden.unwrap() }))
}

/// Full forward pass: per-position next-token logits, optionally capturing
/// the hidden states needed by the last-FFN fast path. The capture is
/// observation-only; logits are identical either way.
pub fn forward_full<T: Scalar>(
    view: &ModelView<T>,
    tokens: &[TokenId],
    capture: bool,
) -> Result<(Matrix<T>, Option<HiddenStateCache<T>>)> {
    let (y, cache) = forward_residual(view, tokens)?;
    let logits = readout(view, &y)?;
    Ok((logits, capture.then_some(cache)))
}

/// Recomputes the last FFN sublayer and the readout above it from a
/// [`HiddenStateCache`]; bit-identical to the tail of [`forward_full`]
/// because it runs the same kernels on the same inputs.
pub fn readout_from_hidden<T: Scalar>(
    view: &ModelView<T>,
    cache: &HiddenStateCache<T>,
) -> Result<Matrix<T>> {
    let cfg = view.config();
    let last = cfg.num_blocks - 1;
    let block = &view.params.blocks[last];
    let h_norm = rmsnorm(&cache.hidden, &block.ffn_norm, cfg.norm_eps);
    let (ffn_out, _) = silu_gate_ffn(&h_norm, view.ffn(last))?;
    let mut y = cache.hidden.clone();
    y.add_assign(&ffn_out);
    readout(view, &y)
}

/// Forward pass that stashes every activation needed for a full backward
/// pass.
pub fn forward_training<T: Scalar>(
    view: &ModelView<T>,
    tokens: &[TokenId],
) -> Result<ForwardTrace<T>> {
    let cfg = view.config();
    check_tokens(cfg, tokens)?;
    let mut x = embed_tokens(view, tokens);
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for b in 0..cfg.num_blocks {
        let out = block_forward(view, b, x, true)?;
        blocks.push(out.trace.unwrap());
        x = out.y;
    }
    let y_norm = rmsnorm(&x, &view.params.final_norm, cfg.norm_eps);
    let logits = matmul_nt(&y_norm, &view.params.unembed)?;
    Ok(ForwardTrace { blocks, y_final: x, y_norm, logits })
}

/// Early-exit readout: residual stream after block `k`, through the final
/// norm, projection, and softmax, at the last position. `k = K` is the
/// degenerate case equal to the final distribution.
pub fn early_exit_distribution<T: Scalar>(
    view: &ModelView<T>,
    tokens: &[TokenId],
    k: usize,
) -> Result<Distribution<T>> {
    let cfg = view.config();
    check_tokens(cfg, tokens)?;
    if k == 0 || k > cfg.num_blocks {
        return Err(Error::invalid(format!(
            "early-exit layer {k} out of range 1..={}",
            cfg.num_blocks
        )));
    }
    let mut x = embed_tokens(view, tokens);
    for b in 0..k {
        x = block_forward(view, b, x, false)?.y;
    }
    let logits = readout(view, &x)?;
    stable_softmax(logits.row(logits.rows() - 1))
}
