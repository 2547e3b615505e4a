//! Dense numeric kernels and the differentiable scalar losses the rest of
//! the engine composes.
//!
//! All reductions accumulate in `f64` with a fixed sequential order, so
//! results are bit-identical across runs and across thread counts.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rayon::prelude::*;

/// Probability floor used inside every `log` / ratio computation. The KL
/// term and the DoLa log-ratio are undefined at zero probability.
pub const EPS_P: f64 = 1e-9;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x = *x * s);
    }
}

/// Accumulate one output row of `A(1,inner) x B(inner,cols)` into `acc`.
#[inline]
fn matmul_row_nn<T: Scalar>(a_row: &[T], b: &Matrix<T>, acc: &mut [f64]) {
    for (k, &a) in a_row.iter().enumerate() {
        let av = a.to_f64s();
        if av == 0.0 {
            continue;
        }
        let b_row = b.row(k);
        for j in 0..acc.len() {
            acc[j] += av * b_row[j].to_f64s();
        }
    }
}

fn finish_row<T: Scalar>(acc: &[f64], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(acc) {
        *o = T::from_f64(v);
    }
}

/// `C = A x B`. Rows are computed independently (safe to parallelize), each
/// row's reduction runs in a fixed order.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::invalid(format!(
            "matmul shape mismatch: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    let cols = b.cols;
    c.data
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(i, out_row)| {
            let mut acc = vec![0.0f64; cols];
            matmul_row_nn(a.row(i), b, &mut acc);
            finish_row(&acc, out_row);
        });
    Ok(c)
}

/// `C = A x B^T`. This is the hot kernel: with weights stored as
/// `(out, in)` matrices, every linear layer is `x W^T`.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::invalid(format!(
            "matmul_nt shape mismatch: {}x{} times ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.rows, b.rows);
    let out_cols = b.rows;
    c.data
        .par_chunks_mut(out_cols)
        .enumerate()
        .for_each(|(i, out_row)| {
            let a_row = a.row(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = T::from_f64(dot_f64(a_row, b.row(j)));
            }
        });
    Ok(c)
}

/// `C = A^T x B`; used for weight gradients (`dW = dY^T X`).
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::invalid(format!(
            "matmul_tn shape mismatch: ({}x{})^T times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.cols, b.cols);
    let cols = b.cols;
    c.data
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(i, out_row)| {
            let mut acc = vec![0.0f64; cols];
            for k in 0..a.rows {
                let av = a.get(k, i).to_f64s();
                if av == 0.0 {
                    continue;
                }
                let b_row = b.row(k);
                for j in 0..cols {
                    acc[j] += av * b_row[j].to_f64s();
                }
            }
            finish_row(&acc, out_row);
        });
    Ok(c)
}

#[inline]
pub fn dot_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += a[i].to_f64s() * b[i].to_f64s();
    }
    s
}

/// Probability vector over the vocabulary for one position.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution<T> {
    probs: Vec<T>,
}

impl<T: Scalar> Distribution<T> {
    /// Wraps a probability vector, checking non-negativity and that the
    /// total mass is 1 within 1e-5.
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty distribution"));
        }
        let mut sum = 0.0f64;
        for &p in &probs {
            let v = p.to_f64s();
            if !(v >= 0.0) {
                return Err(Error::invalid(format!("negative or NaN probability {v}")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!("probabilities sum to {sum}")));
        }
        Ok(Distribution { probs })
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Softmax with max-subtraction; invariant to adding a constant to all
/// logits and well-behaved for magnitudes up to about 1e4 in f32.
pub fn stable_softmax<T: Scalar>(logits: &[T]) -> Result<Distribution<T>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of empty logit vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax of non-finite logits"));
    }
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64s()));
    let mut exps = vec![0.0f64; logits.len()];
    let mut sum = 0.0f64;
    for (e, &l) in exps.iter_mut().zip(logits) {
        *e = (l.to_f64s() - max).exp();
        sum += *e;
    }
    let probs = exps.iter().map(|&e| T::from_f64(e / sum)).collect();
    Ok(Distribution { probs })
}

/// `-log p[target]`, with the probability floored at [`EPS_P`].
pub fn cross_entropy<T: Scalar>(dist: &Distribution<T>, target: usize) -> Result<f64> {
    if target >= dist.len() {
        return Err(Error::invalid(format!(
            "target {target} out of range for vocabulary {}",
            dist.len()
        )));
    }
    Ok(-dist.probs[target].to_f64s().max(EPS_P).ln())
}

/// `KL(p || q) = sum p ln(p/q)`, with `q` floored at [`EPS_P`].
pub fn kl_divergence<T: Scalar>(p: &Distribution<T>, q: &Distribution<T>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "KL length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut kl = 0.0f64;
    for (pv, qv) in p.probs.iter().zip(&q.probs) {
        let pv = pv.to_f64s();
        if pv > 0.0 {
            kl += pv * (pv / qv.to_f64s().max(EPS_P)).ln();
        }
    }
    Ok(kl)
}

/// Jensen-Shannon divergence; symmetric and bounded by ln 2.
pub fn js_divergence<T: Scalar>(p: &Distribution<T>, q: &Distribution<T>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "JSD length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mid: Vec<T> = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(&a, &b)| T::from_f64(0.5 * (a.to_f64s() + b.to_f64s())))
        .collect();
    let m = Distribution { probs: mid };
    Ok(0.5 * kl_divergence(p, &m)? + 0.5 * kl_divergence(q, &m)?)
}

/// RMS normalization of one row: `y_i = x_i * g_i / rms(x)`.
pub fn rmsnorm_row<T: Scalar>(x: &[T], gain: &[T], eps: f64, out: &mut [T]) {
    debug_assert_eq!(x.len(), gain.len());
    let mut ss = 0.0f64;
    for &v in x {
        let v = v.to_f64s();
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f64 + eps).sqrt();
    for i in 0..x.len() {
        out[i] = T::from_f64(x[i].to_f64s() * gain[i].to_f64s() * inv);
    }
}

pub fn rmsnorm<T: Scalar>(x: &Matrix<T>, gain: &[T], eps: f64) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let (src, dst) = (x.row(i), i);
        rmsnorm_row(src, gain, eps, out.row_mut(dst));
    }
    out
}

/// Backward of [`rmsnorm_row`]: writes `dL/dx` and accumulates `dL/dgain`.
pub fn rmsnorm_backward_row<T: Scalar>(
    x: &[T],
    gain: &[T],
    eps: f64,
    dy: &[T],
    dx: &mut [T],
    dgain: &mut [T],
) {
    let n = x.len();
    let mut ss = 0.0f64;
    for &v in x {
        let v = v.to_f64s();
        ss += v * v;
    }
    let r = (ss / n as f64 + eps).sqrt();
    let inv = 1.0 / r;
    // c = sum_i dy_i * g_i * x_i
    let mut c = 0.0f64;
    for i in 0..n {
        c += dy[i].to_f64s() * gain[i].to_f64s() * x[i].to_f64s();
    }
    let k = c / (n as f64 * r * r * r);
    for i in 0..n {
        let xi = x[i].to_f64s();
        dx[i] = T::from_f64(dy[i].to_f64s() * gain[i].to_f64s() * inv - xi * k);
        dgain[i] += T::from_f64(dy[i].to_f64s() * xi * inv);
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Weights of a gated-SiLU feed-forward module.
///
/// `w_gate`, `w_up` are `(d_ff, d_model)`, `w_down` is `(d_model, d_ff)`;
/// biases are per-output-row.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights<T> {
    pub w_gate: Matrix<T>,
    pub b_gate: Vec<T>,
    pub w_up: Matrix<T>,
    pub b_up: Vec<T>,
    pub w_down: Matrix<T>,
    pub b_down: Vec<T>,
}

impl<T: Scalar> FfnWeights<T> {
    pub fn zeros(d_model: usize, d_ff: usize) -> Self {
        FfnWeights {
            w_gate: Matrix::zeros(d_ff, d_model),
            b_gate: vec![T::zero(); d_ff],
            w_up: Matrix::zeros(d_ff, d_model),
            b_up: vec![T::zero(); d_ff],
            w_down: Matrix::zeros(d_model, d_ff),
            b_down: vec![T::zero(); d_model],
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_gate.cols()
    }

    pub fn d_ff(&self) -> usize {
        self.w_gate.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w_gate.data().len()
            + self.w_up.data().len()
            + self.w_down.data().len()
            + self.b_gate.len()
            + self.b_up.len()
            + self.b_down.len()
    }

    /// Visit all parameters in a fixed canonical order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut T)) {
        for v in self.w_gate.data_mut() {
            f(v);
        }
        for v in self.b_gate.iter_mut() {
            f(v);
        }
        for v in self.w_up.data_mut() {
            f(v);
        }
        for v in self.b_up.iter_mut() {
            f(v);
        }
        for v in self.w_down.data_mut() {
            f(v);
        }
        for v in self.b_down.iter_mut() {
            f(v);
        }
    }

    /// Visits every parameter mutably, paired with the matching parameter
    /// of `other`, in [`FfnWeights::flatten`] order.
    pub fn zip_param_mut(&mut self, other: &Self, mut f: impl FnMut(&mut T, T)) {
        for (a, &b) in self.w_gate.data_mut().iter_mut().zip(other.w_gate.data()) {
            f(a, b);
        }
        for (a, &b) in self.b_gate.iter_mut().zip(&other.b_gate) {
            f(a, b);
        }
        for (a, &b) in self.w_up.data_mut().iter_mut().zip(other.w_up.data()) {
            f(a, b);
        }
        for (a, &b) in self.b_up.iter_mut().zip(&other.b_up) {
            f(a, b);
        }
        for (a, &b) in self.w_down.data_mut().iter_mut().zip(other.w_down.data()) {
            f(a, b);
        }
        for (a, &b) in self.b_down.iter_mut().zip(&other.b_down) {
            f(a, b);
        }
    }

    /// The six parameter tensors as contiguous slices in
    /// [`FfnWeights::flatten`] order.
    pub fn param_blocks(&self) -> [&[T]; 6] {
        [
            self.w_gate.data(),
            &self.b_gate,
            self.w_up.data(),
            &self.b_up,
            self.w_down.data(),
            &self.b_down,
        ]
    }

    /// Mutable counterpart of [`FfnWeights::param_blocks`].
    pub fn param_blocks_mut(&mut self) -> [&mut [T]; 6] {
        [
            self.w_gate.data_mut(),
            &mut self.b_gate,
            self.w_up.data_mut(),
            &mut self.b_up,
            self.w_down.data_mut(),
            &mut self.b_down,
        ]
    }

    /// Iterates every parameter in [`FfnWeights::flatten`] order without
    /// allocating.
    pub fn iter_params(&self) -> impl Iterator<Item = &T> {
        self.w_gate
            .data()
            .iter()
            .chain(&self.b_gate)
            .chain(self.w_up.data())
            .chain(&self.b_up)
            .chain(self.w_down.data())
            .chain(&self.b_down)
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.w_gate.data());
        out.extend_from_slice(&self.b_gate);
        out.extend_from_slice(self.w_up.data());
        out.extend_from_slice(&self.b_up);
        out.extend_from_slice(self.w_down.data());
        out.extend_from_slice(&self.b_down);
        out
    }
}

/// Intermediate activations of one FFN forward, kept for the backward pass.
pub struct FfnTrace<T> {
    pub gate_pre: Matrix<T>,
    pub up_pre: Matrix<T>,
    pub hidden: Matrix<T>,
}

fn add_bias_rows<T: Scalar>(m: &mut Matrix<T>, bias: &[T]) {
    for i in 0..m.rows() {
        for (v, &b) in m.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Forward of the gated-SiLU FFN over all rows of `x`:
/// `y = W_down (silu(W_gate x + b_gate) * (W_up x + b_up)) + b_down`.
pub fn silu_gate_ffn<T: Scalar>(x: &Matrix<T>, w: &FfnWeights<T>) -> Result<(Matrix<T>, FfnTrace<T>)> {
    let mut gate_pre = matmul_nt(x, &w.w_gate)?;
    add_bias_rows(&mut gate_pre, &w.b_gate);
    let mut up_pre = matmul_nt(x, &w.w_up)?;
    add_bias_rows(&mut up_pre, &w.b_up);
    let mut hidden = Matrix::zeros(x.rows(), w.d_ff());
    for i in 0..x.rows() {
        let g = gate_pre.row(i);
        let u = up_pre.row(i);
        let h = hidden.row_mut(i);
        for j in 0..h.len() {
            h[j] = T::from_f64(silu(g[j].to_f64s()) * u[j].to_f64s());
        }
    }
    let mut y = matmul_nt(&hidden, &w.w_down)?;
    add_bias_rows(&mut y, &w.b_down);
    Ok((y, FfnTrace { gate_pre, up_pre, hidden }))
}

/// The output of [`silu_gate_ffn`] without retaining the trace, computed
/// in row tiles so the transient footprint stays proportional to the tile,
/// not the sequence. Bitwise identical to the traced version: every kernel
/// involved treats rows independently.
pub fn silu_gate_ffn_notrace<T: Scalar>(x: &Matrix<T>, w: &FfnWeights<T>) -> Result<Matrix<T>> {
    const TILE: usize = 32;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut r = 0usize;
    while r < x.rows() {
        let end = (r + TILE).min(x.rows());
        let mut tile = Matrix::zeros(end - r, x.cols());
        for i in r..end {
            tile.row_mut(i - r).copy_from_slice(x.row(i));
        }
        let (o, _) = silu_gate_ffn(&tile, w)?;
        for i in r..end {
            out.row_mut(i).copy_from_slice(o.row(i - r));
        }
        r = end;
    }
    Ok(out)
}

/// Gradients produced by [`silu_gate_ffn_backward`].
pub struct FfnGrads<T> {
    pub weights: FfnWeights<T>,
    pub dx: Matrix<T>,
}

fn bias_grad<T: Scalar>(d: &Matrix<T>) -> Vec<T> {
    let mut out = vec![0.0f64; d.cols()];
    for i in 0..d.rows() {
        for (acc, &v) in out.iter_mut().zip(d.row(i)) {
            *acc += v.to_f64s();
        }
    }
    out.into_iter().map(T::from_f64).collect()
}

/// Backward of [`silu_gate_ffn`] w.r.t. weights and input.
///
/// `need_dx` skips the input-gradient matmuls when the caller only adapts
/// weights (the cached-hidden-state fast path).
pub fn silu_gate_ffn_backward<T: Scalar>(
    x: &Matrix<T>,
    w: &FfnWeights<T>,
    trace: &FfnTrace<T>,
    dy: &Matrix<T>,
    need_dx: bool,
) -> Result<FfnGrads<T>> {
    let d_ff = w.d_ff();
    // dH = dY W_down ; dW_down = dY^T H
    let dh = matmul(dy, &w.w_down)?;
    let dw_down = matmul_tn(dy, &trace.hidden)?;
    let b_down = bias_grad(dy);

    let rows = x.rows();
    let mut dgate = Matrix::zeros(rows, d_ff);
    let mut dup = Matrix::zeros(rows, d_ff);
    for i in 0..rows {
        let g = trace.gate_pre.row(i);
        let u = trace.up_pre.row(i);
        let dhr = dh.row(i);
        let dg = dgate.row_mut(i);
        for j in 0..d_ff {
            dg[j] = T::from_f64(dhr[j].to_f64s() * u[j].to_f64s() * silu_prime(g[j].to_f64s()));
        }
        let du = dup.row_mut(i);
        for j in 0..d_ff {
            du[j] = T::from_f64(dhr[j].to_f64s() * silu(g[j].to_f64s()));
        }
    }
    let dw_gate = matmul_tn(&dgate, x)?;
    let dw_up = matmul_tn(&dup, x)?;
    let b_gate = bias_grad(&dgate);
    let b_up = bias_grad(&dup);

    let dx = if need_dx {
        let mut dx = matmul(&dgate, &w.w_gate)?;
        dx.add_assign(&matmul(&dup, &w.w_up)?);
        dx
    } else {
        Matrix::zeros(0, 0)
    };

    Ok(FfnGrads {
        weights: FfnWeights {
            w_gate: dw_gate,
            b_gate,
            w_up: dw_up,
            b_up,
            w_down: dw_down,
            b_down,
        },
        dx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn softmax_uniform_logits() {
        let d = stable_softmax(&[0.0f32, 0.0, 0.0]).unwrap();
        for &p in d.probs() {
            approx(p as f64, 1.0 / 3.0, 1e-7);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let base = stable_softmax(&[0.0f32, 0.0, 0.0]).unwrap();
        for c in [5.0f32, -123.0, 9999.0] {
            let shifted = stable_softmax(&[c, c, c]).unwrap();
            assert_eq!(base.probs(), shifted.probs());
        }
    }

    #[test]
    fn softmax_derived_values() {
        // High-precision evaluation of e^x / sum e^x for [1,2,3].
        let d = stable_softmax(&[1.0f64, 2.0, 3.0]).unwrap();
        approx(d.probs()[0], 0.09003057317038046, 1e-12);
        approx(d.probs()[1], 0.24472847105479767, 1e-12);
        approx(d.probs()[2], 0.6652409557748219, 1e-12);
    }

    #[test]
    fn softmax_extreme_magnitude_stays_normalized() {
        let d = stable_softmax(&[1e4f32, -1e4, 0.0]).unwrap();
        let sum: f64 = d.probs().iter().map(|&p| p as f64).sum();
        approx(sum, 1.0, 1e-5);
        assert!(d.probs().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(stable_softmax::<f32>(&[]).is_err());
    }

    #[test]
    fn cross_entropy_one_hot_and_uniform() {
        let one_hot = Distribution::new(vec![0.0f64, 1.0, 0.0, 0.0]).unwrap();
        approx(cross_entropy(&one_hot, 1).unwrap(), 0.0, 1e-12);
        let uniform = Distribution::new(vec![0.25f64; 4]).unwrap();
        // closed form -ln(1/V)
        approx(cross_entropy(&uniform, 3).unwrap(), 4.0f64.ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_floor_and_range() {
        let d = Distribution::new(vec![0.0f64, 1.0]).unwrap();
        let ce = cross_entropy(&d, 0).unwrap();
        assert!(ce.is_finite());
        approx(ce, -EPS_P.ln(), 1e-9);
        assert!(cross_entropy(&d, 2).is_err());
    }

    #[test]
    fn kl_identical_zero_and_closed_forms() {
        let p = Distribution::new(vec![0.3f64, 0.7]).unwrap();
        approx(kl_divergence(&p, &p).unwrap(), 0.0, 1e-12);
        let p = Distribution::new(vec![1.0f64, 0.0]).unwrap();
        let q = Distribution::new(vec![0.5f64, 0.5]).unwrap();
        approx(kl_divergence(&p, &q).unwrap(), 2.0f64.ln(), 1e-12);
    }

    #[test]
    fn kl_is_asymmetric() {
        let p = Distribution::new(vec![0.9f64, 0.1]).unwrap();
        let q = Distribution::new(vec![0.5f64, 0.5]).unwrap();
        let a = kl_divergence(&p, &q).unwrap();
        let b = kl_divergence(&q, &p).unwrap();
        assert!((a - b).abs() > 1e-3, "KL should be asymmetric: {a} vs {b}");
        let mismatch = Distribution::new(vec![1.0f64]).unwrap();
        assert!(kl_divergence(&p, &mismatch).is_err());
    }

    #[test]
    fn jsd_symmetric_nonnegative() {
        let p = Distribution::new(vec![0.9f64, 0.1]).unwrap();
        let q = Distribution::new(vec![0.5f64, 0.5]).unwrap();
        let a = js_divergence(&p, &q).unwrap();
        let b = js_divergence(&q, &p).unwrap();
        approx(a, b, 1e-12);
        assert!(a >= 0.0);
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::from_vec(3, 3, (0..9).map(|_| rng.random::<f32>()).collect());
        let c = matmul(&Matrix::identity(3), &a).unwrap();
        assert_eq!(c, a);
        assert!(matmul(&Matrix::<f32>::zeros(2, 3), &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Matrix::from_vec(4, 5, (0..20).map(|_| rng.random::<f64>()).collect());
        let b = Matrix::from_vec(5, 3, (0..15).map(|_| rng.random::<f64>()).collect());
        let c = matmul(&a, &b).unwrap();
        // b^T as explicit matrix
        let mut bt = Matrix::zeros(3, 5);
        for i in 0..5 {
            for j in 0..3 {
                bt.set(j, i, b.get(i, j));
            }
        }
        let c2 = matmul_nt(&a, &bt).unwrap();
        for (x, y) in c.data().iter().zip(c2.data()) {
            approx(*x, *y, 1e-12);
        }
        let mut at = Matrix::zeros(5, 4);
        for i in 0..4 {
            for j in 0..5 {
                at.set(j, i, a.get(i, j));
            }
        }
        let c3 = matmul_tn(&at, &b).unwrap();
        for (x, y) in c.data().iter().zip(c3.data()) {
            approx(*x, *y, 1e-12);
        }
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn rmsnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 7;
        let x = rand_vec(&mut rng, n);
        let gain = rand_vec(&mut rng, n);
        let dy = rand_vec(&mut rng, n);
        let eps = 1e-5;

        let loss = |x: &[f64], g: &[f64]| -> f64 {
            let mut y = vec![0.0; n];
            rmsnorm_row(x, g, eps, &mut y);
            y.iter().zip(&dy).map(|(a, b)| a * b).sum()
        };

        let mut dx = vec![0.0; n];
        let mut dgain = vec![0.0; n];
        rmsnorm_backward_row(&x, &gain, eps, &dy, &mut dx, &mut dgain);

        let h = 1e-4;
        for i in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp, &gain) - loss(&xm, &gain)) / (2.0 * h);
            let rel = (fd - dx[i]).abs() / fd.abs().max(dx[i].abs()).max(1e-8);
            assert!(rel <= 1e-4, "dx[{i}]: fd={fd} analytic={}", dx[i]);

            let mut gp = gain.clone();
            let mut gm = gain.clone();
            gp[i] += h;
            gm[i] -= h;
            let fd = (loss(&x, &gp) - loss(&x, &gm)) / (2.0 * h);
            let rel = (fd - dgain[i]).abs() / fd.abs().max(dgain[i].abs()).max(1e-8);
            assert!(rel <= 1e-4, "dgain[{i}]: fd={fd} analytic={}", dgain[i]);
        }
    }

    fn rand_ffn(rng: &mut ChaCha8Rng, d: usize, d_ff: usize) -> FfnWeights<f64> {
        FfnWeights {
            w_gate: Matrix::from_vec(d_ff, d, rand_vec(rng, d_ff * d)),
            b_gate: rand_vec(rng, d_ff),
            w_up: Matrix::from_vec(d_ff, d, rand_vec(rng, d_ff * d)),
            b_up: rand_vec(rng, d_ff),
            w_down: Matrix::from_vec(d, d_ff, rand_vec(rng, d * d_ff)),
            b_down: rand_vec(rng, d),
        }
    }

    #[test]
    fn ffn_zero_input_takes_bias_only_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (d, d_ff) = (4, 6);
        let w = rand_ffn(&mut rng, d, d_ff);
        let x = Matrix::<f64>::zeros(1, d);
        let (y, _) = silu_gate_ffn(&x, &w).unwrap();
        // With zero input only the biases reach the output.
        let mut expect = vec![0.0; d];
        for j in 0..d {
            let mut acc = w.b_down[j];
            for i in 0..d_ff {
                acc += w.w_down.get(j, i) * silu(w.b_gate[i]) * w.b_up[i];
            }
            expect[j] = acc;
        }
        for j in 0..d {
            approx(y.get(0, j), expect[j], 1e-12);
        }
    }

    #[test]
    fn ffn_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d, d_ff, rows) = (3, 5, 2);
        let w = rand_ffn(&mut rng, d, d_ff);
        let x = Matrix::from_vec(rows, d, rand_vec(&mut rng, rows * d));
        let dy = Matrix::from_vec(rows, d, rand_vec(&mut rng, rows * d));

        let loss = |w: &FfnWeights<f64>, x: &Matrix<f64>| -> f64 {
            let (y, _) = silu_gate_ffn(x, w).unwrap();
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };

        let (_, trace) = silu_gate_ffn(&x, &w).unwrap();
        let grads = silu_gate_ffn_backward(&x, &w, &trace, &dy, true).unwrap();

        let h = 1e-4;
        let check = |fd: f64, an: f64, what: &str| {
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel <= 1e-4, "{what}: fd={fd} analytic={an}");
        };
        // sample a handful of weight coordinates from each tensor
        for idx in [0usize, 7, 11] {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.w_gate.data_mut()[idx] += h;
            wm.w_gate.data_mut()[idx] -= h;
            check(
                (loss(&wp, &x) - loss(&wm, &x)) / (2.0 * h),
                grads.weights.w_gate.data()[idx],
                "w_gate",
            );
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.w_down.data_mut()[idx] += h;
            wm.w_down.data_mut()[idx] -= h;
            check(
                (loss(&wp, &x) - loss(&wm, &x)) / (2.0 * h),
                grads.weights.w_down.data()[idx],
                "w_down",
            );
        }
        for i in 0..d_ff {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.b_up[i] += h;
            wm.b_up[i] -= h;
            check(
                (loss(&wp, &x) - loss(&wm, &x)) / (2.0 * h),
                grads.weights.b_up[i],
                "b_up",
            );
        }
        for idx in 0..rows * d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            check(
                (loss(&w, &xp) - loss(&w, &xm)) / (2.0 * h),
                grads.dx.data()[idx],
                "dx",
            );
        }
    }

    #[test]
    fn matmul_is_deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Matrix::from_vec(17, 9, (0..153).map(|_| rng.random::<f32>()).collect());
        let b = Matrix::from_vec(9, 13, (0..117).map(|_| rng.random::<f32>()).collect());
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        assert_eq!(c1.data(), c2.data());
    }
}
