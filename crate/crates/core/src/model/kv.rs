use crate::error::{Error, Result};
use crate::model::forward::rope_apply;
use crate::model::ModelView;
use crate::numeric::{rmsnorm_row, stable_softmax, Distribution, Matrix, dot_f64, silu_gate_ffn};
use crate::scalar::Scalar;
use crate::tokenizer::TokenId;

/// Per-block key/value rows for incremental decoding. Keys are stored
/// post-rotation, as full `d_model` rows sliced per head on use.
pub struct KvCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
    d_model: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(num_blocks: usize, d_model: usize) -> Self {
        KvCache {
            k: vec![Vec::new(); num_blocks],
            v: vec![Vec::new(); num_blocks],
            len: 0,
            d_model,
        }
    }

    /// Number of tokens already fed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn k_row(&self, block: usize, pos: usize) -> &[T] {
        &self.k[block][pos * self.d_model..(pos + 1) * self.d_model]
    }

    fn v_row(&self, block: usize, pos: usize) -> &[T] {
        &self.v[block][pos * self.d_model..(pos + 1) * self.d_model]
    }
}

fn matvec_nt<T: Scalar>(w: &Matrix<T>, x: &[T], out: &mut [T]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = T::from_f64(dot_f64(x, w.row(j)));
    }
}

/// Feeds one token through the model using the KV cache, returning the
/// next-token distribution and, when requested, early-exit distributions
/// for the listed blocks (1-based exit layers).
pub fn decode_step_with_exits<T: Scalar>(
    view: &ModelView<T>,
    cache: &mut KvCache<T>,
    token: TokenId,
    exit_layers: &[usize],
) -> Result<(Distribution<T>, Vec<Distribution<T>>)> {
    let cfg = view.config();
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let head_dim = cfg.head_dim();
    let pos = cache.len;
    if pos >= cfg.context_window {
        return Err(Error::ContextOverflow { needed: pos + 1, window: cfg.context_window });
    }
    if token as usize >= cfg.vocab_size {
        return Err(Error::invalid(format!("token id {token} out of range")));
    }

    let readout_row = |x: &[T]| -> Result<Distribution<T>> {
        let mut y = vec![T::zero(); d];
        rmsnorm_row(x, &view.params.final_norm, cfg.norm_eps, &mut y);
        let mut logits = vec![T::zero(); cfg.vocab_size];
        matvec_nt(&view.params.unembed, &y, &mut logits);
        stable_softmax(&logits)
    };

    let mut x: Vec<T> = view.params.embed.row(token as usize).to_vec();
    let mut exits = Vec::with_capacity(exit_layers.len());
    let scale = 1.0 / (head_dim as f64).sqrt();

    for b in 0..cfg.num_blocks {
        let block = &view.params.blocks[b];
        let mut x_norm = vec![T::zero(); d];
        rmsnorm_row(&x, &block.attn_norm, cfg.norm_eps, &mut x_norm);
        let mut q = vec![T::zero(); d];
        let mut k = vec![T::zero(); d];
        let mut v = vec![T::zero(); d];
        matvec_nt(&block.wq, &x_norm, &mut q);
        matvec_nt(&block.wk, &x_norm, &mut k);
        matvec_nt(&block.wv, &x_norm, &mut v);
        rope_apply(&mut q, pos, n_heads, head_dim, 1.0);
        rope_apply(&mut k, pos, n_heads, head_dim, 1.0);
        cache.k[b].extend_from_slice(&k);
        cache.v[b].extend_from_slice(&v);

        let mut cat = vec![T::zero(); d];
        let mut scores = vec![0.0f64; pos + 1];
        for h in 0..n_heads {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            let qh = &q[lo..hi];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=pos {
                let kj = &cache.k_row(b, j)[lo..hi];
                let mut s = 0.0f64;
                for c in 0..head_dim {
                    s += qh[c].to_f64s() * kj[c].to_f64s();
                }
                scores[j] = s * scale;
                max = max.max(scores[j]);
            }
            let mut sum = 0.0f64;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let mut acc = vec![0.0f64; head_dim];
            for j in 0..=pos {
                let p = scores[j] / sum;
                let vj = &cache.v_row(b, j)[lo..hi];
                for c in 0..head_dim {
                    acc[c] += p * vj[c].to_f64s();
                }
            }
            for c in 0..head_dim {
                cat[lo + c] = T::from_f64(acc[c]);
            }
        }
        let mut attn_out = vec![T::zero(); d];
        matvec_nt(&block.wo, &cat, &mut attn_out);
        let mut h_res = x.clone();
        for (a, b_) in h_res.iter_mut().zip(&attn_out) {
            *a += *b_;
        }
        let mut h_norm = vec![T::zero(); d];
        rmsnorm_row(&h_res, &block.ffn_norm, cfg.norm_eps, &mut h_norm);
        let (ffn_out, _) =
            silu_gate_ffn(&Matrix::from_vec(1, d, h_norm), view.ffn(b))?;
        let mut y = h_res;
        for (a, b_) in y.iter_mut().zip(ffn_out.row(0)) {
            *a += *b_;
        }
        x = y;
        if exit_layers.contains(&(b + 1)) {
            exits.push(readout_row(&x)?);
        }
    }
    cache.len += 1;
    Ok((readout_row(&x)?, exits))
}

/// Next-token distribution for one token; equivalent to the last row of a
/// full forward over the concatenated sequence.
pub fn decode_step<T: Scalar>(
    view: &ModelView<T>,
    cache: &mut KvCache<T>,
    token: TokenId,
) -> Result<Distribution<T>> {
    decode_step_with_exits(view, cache, token, &[]).map(|(d, _)| d)
}
