use crate::error::Result;
use crate::model::forward::{rope_apply, ForwardTrace};
use crate::model::ModelView;
use crate::numeric::{
    matmul, matmul_tn, rmsnorm_backward_row, silu_gate_ffn_backward, FfnWeights, Matrix,
};
use crate::scalar::Scalar;
use crate::tokenizer::TokenId;

/// Gradients for one block, mirroring [`crate::model::BlockParams`].
pub struct BlockGrads<T> {
    pub attn_norm: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ffn_norm: Vec<T>,
    pub ffn: FfnWeights<T>,
}

/// Gradients for every parameter, mirroring [`crate::model::ModelParams`].
pub struct ParamGrads<T> {
    pub embed: Matrix<T>,
    pub blocks: Vec<BlockGrads<T>>,
    pub final_norm: Vec<T>,
    pub unembed: Matrix<T>,
}

fn rmsnorm_backward<T: Scalar>(
    x: &Matrix<T>,
    gain: &[T],
    eps: f64,
    dy: &Matrix<T>,
    dgain: &mut [T],
) -> Matrix<T> {
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        rmsnorm_backward_row(x.row(i), gain, eps, dy.row(i), dx.row_mut(i), dgain);
    }
    dx
}

/// Backward through causal attention given the stored probability rows.
/// Returns (dq, dk, dv) in post-rope coordinates.
fn attention_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    probs: &[Matrix<T>],
    d_cat: &Matrix<T>,
    n_heads: usize,
    head_dim: usize,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let t_len = q.rows();
    let d = n_heads * head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dq = Matrix::zeros(t_len, d);
    let mut dk64 = vec![0.0f64; t_len * d];
    let mut dv64 = vec![0.0f64; t_len * d];
    let mut dp = vec![0.0f64; t_len];
    for h in 0..n_heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let p = &probs[h];
        for i in 0..t_len {
            let doi = &d_cat.row(i)[lo..hi];
            // dP_ij = <dO_i, V_j>; dV_j += P_ij dO_i
            let mut row_dot = 0.0f64;
            for j in 0..=i {
                let pij = p.get(i, j).to_f64s();
                let vj = &v.row(j)[lo..hi];
                let mut s = 0.0f64;
                for c in 0..head_dim {
                    s += doi[c].to_f64s() * vj[c].to_f64s();
                }
                dp[j] = s;
                row_dot += s * pij;
                let dvj = &mut dv64[j * d + lo..j * d + hi];
                for c in 0..head_dim {
                    dvj[c] += pij * doi[c].to_f64s();
                }
            }
            // softmax backward: dS_ij = P_ij (dP_ij - sum_j' dP_ij' P_ij')
            let mut dqi = vec![0.0f64; head_dim];
            for j in 0..=i {
                let ds = p.get(i, j).to_f64s() * (dp[j] - row_dot) * scale;
                let kj = &k.row(j)[lo..hi];
                let qi = &q.row(i)[lo..hi];
                let dkj = &mut dk64[j * d + lo..j * d + hi];
                for c in 0..head_dim {
                    dqi[c] += ds * kj[c].to_f64s();
                    dkj[c] += ds * qi[c].to_f64s();
                }
            }
            let out = &mut dq.row_mut(i)[lo..hi];
            for c in 0..head_dim {
                out[c] = T::from_f64(dqi[c]);
            }
        }
    }
    let dk = Matrix::from_vec(t_len, d, dk64.into_iter().map(T::from_f64).collect());
    let dv = Matrix::from_vec(t_len, d, dv64.into_iter().map(T::from_f64).collect());
    (dq, dk, dv)
}

/// Full backprop from a per-position logit gradient down to every parameter,
/// including the token embeddings.
pub fn backward_full<T: Scalar>(
    view: &ModelView<T>,
    trace: &ForwardTrace<T>,
    tokens: &[TokenId],
    d_logits: &Matrix<T>,
) -> Result<ParamGrads<T>> {
    let cfg = view.config();
    let d = cfg.d_model;
    let eps = cfg.norm_eps;

    // Readout: logits = y_norm unembed^T.
    let d_unembed = matmul_tn(d_logits, &trace.y_norm)?;
    let dy_norm = matmul(d_logits, &view.params.unembed)?;
    let mut d_final_norm = vec![T::zero(); d];
    let mut dy = rmsnorm_backward(&trace.y_final, &view.params.final_norm, eps, &dy_norm, &mut d_final_norm);

    let mut blocks_rev = Vec::with_capacity(cfg.num_blocks);
    for b in (0..cfg.num_blocks).rev() {
        let bt = &trace.blocks[b];
        let bp = &view.params.blocks[b];

        // y = h + ffn(h_norm)
        let ffn = silu_gate_ffn_backward(&bt.h_norm, view.ffn(b), &bt.ffn_trace, &dy, true)?;
        let mut d_ffn_norm = vec![T::zero(); d];
        let mut dh = rmsnorm_backward(&bt.h, &bp.ffn_norm, eps, &ffn.dx, &mut d_ffn_norm);
        dh.add_assign(&dy);

        // h = x + attn_out, attn_out = cat wo^T
        let dwo = matmul_tn(&dh, &bt.attn_cat)?;
        let d_cat = matmul(&dh, &bp.wo)?;
        let (mut dq, mut dk, dv) = attention_backward(
            &bt.q,
            &bt.k,
            &bt.v,
            &bt.probs,
            &d_cat,
            cfg.n_heads,
            cfg.head_dim(),
        );
        for i in 0..dq.rows() {
            rope_apply(dq.row_mut(i), i, cfg.n_heads, cfg.head_dim(), -1.0);
            rope_apply(dk.row_mut(i), i, cfg.n_heads, cfg.head_dim(), -1.0);
        }
        let dwq = matmul_tn(&dq, &bt.x_norm)?;
        let dwk = matmul_tn(&dk, &bt.x_norm)?;
        let dwv = matmul_tn(&dv, &bt.x_norm)?;
        let mut dx_norm = matmul(&dq, &bp.wq)?;
        dx_norm.add_assign(&matmul(&dk, &bp.wk)?);
        dx_norm.add_assign(&matmul(&dv, &bp.wv)?);
        let mut d_attn_norm = vec![T::zero(); d];
        let mut dx = rmsnorm_backward(&bt.x_in, &bp.attn_norm, eps, &dx_norm, &mut d_attn_norm);
        dx.add_assign(&dh);

        blocks_rev.push(BlockGrads {
            attn_norm: d_attn_norm,
            wq: dwq,
            wk: dwk,
            wv: dwv,
            wo: dwo,
            ffn_norm: d_ffn_norm,
            ffn: ffn.weights,
        });
        dy = dx;
    }
    blocks_rev.reverse();

    let mut d_embed = Matrix::zeros(cfg.vocab_size, d);
    for (i, &t) in tokens.iter().enumerate() {
        let src = dy.row(i);
        let dst = d_embed.row_mut(t as usize);
        for (a, &b_) in dst.iter_mut().zip(src) {
            *a += b_;
        }
    }

    Ok(ParamGrads {
        embed: d_embed,
        blocks: blocks_rev,
        final_norm: d_final_norm,
        unembed: d_unembed,
    })
}
