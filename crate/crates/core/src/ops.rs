//! Forward and backward kernels for the dense operations used by both towers.
//!
//! Every reduction runs in a fixed order (left to right over the reduced
//! axis) so results are bit-stable across runs. Backward kernels take the
//! upstream gradient and whatever the forward pass cached, and return
//! gradients for each differentiable input.

use crate::error::{Error, Result};
use crate::tensor::{BoolMask, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// raw slice kernels

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, (k, 1), b, (n, 1), c, m, k, n);
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_strided(a, (k, 1), b, (1, k), c, m, k, n);
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    gemm_strided(a, (1, m), b, (n, 1), c, m, k, n);
}

/// Single-threaded blocked GEMM; each output element accumulates over `k`
/// in increasing order, so results are reproducible run to run.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches for
    // the given dimensions and unit-or-row strides, and `c` does not alias
    // `a` or `b` (it is a distinct mutable borrow).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_row_masked(logits: &[f64], admit: &[bool], out: &mut [f64]) -> bool {
    if !admit.contains(&true) {
        return false;
    }
    // NaN logits must surface as NaN output, not be skipped by the max.
    let mut max = f64::NEG_INFINITY;
    for (&x, &a) in logits.iter().zip(admit) {
        if a && (x > max || x.is_nan()) {
            max = x;
        }
    }
    let mut sum = 0.0;
    for ((o, &x), &a) in out.iter_mut().zip(logits).zip(admit) {
        *o = if a { (x - max).exp() } else { 0.0 };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    true
}

fn softmax_row_backward(probs: &[f64], dprobs: &[f64], dlogits: &mut [f64]) {
    let mut dot = 0.0;
    for (p, g) in probs.iter().zip(dprobs) {
        dot += p * g;
    }
    for ((d, &p), &g) in dlogits.iter_mut().zip(probs).zip(dprobs) {
        *d = p * (g - dot);
    }
}

// ---------------------------------------------------------------------------
// matmul

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_2d("matmul")?;
    let (k2, n) = b.expect_2d("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("[{m},{k}] x [{k2},{n}]")));
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Gradients of `a * b` given the upstream gradient of the product.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dout: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut da = vec![0.0; m * k];
    gemm_nt(dout.data(), b.data(), &mut da, m, n, k);
    let mut db = vec![0.0; k * n];
    gemm_tn(a.data(), dout.data(), &mut db, m, k, n);
    (
        Tensor::new(vec![m, k], da).expect("shape"),
        Tensor::new(vec![k, n], db).expect("shape"),
    )
}

// ---------------------------------------------------------------------------
// linear

/// `x[n,in] * w[in,out] + b[out]`
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut out = matmul(x, w)?;
    if let Some(b) = b {
        let cols = out.cols();
        if b.numel() != cols {
            return Err(Error::dim("linear", format!("bias {} vs {cols} outputs", b.numel())));
        }
        for row in out.data_mut().chunks_mut(cols) {
            for (o, bias) in row.iter_mut().zip(b.data()) {
                *o += bias;
            }
        }
    }
    Ok(out)
}

pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Option<Tensor>,
}

pub fn linear_backward(x: &Tensor, w: &Tensor, has_bias: bool, dout: &Tensor) -> LinearGrads {
    let (dx, dw) = matmul_backward(x, w, dout);
    let db = has_bias.then(|| {
        let cols = dout.cols();
        let mut db = vec![0.0; cols];
        for row in dout.data().chunks(cols) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        Tensor::new(vec![cols], db).expect("shape")
    });
    LinearGrads { dx, dw, db }
}

// ---------------------------------------------------------------------------
// softmax

/// Row-wise softmax over the admitted entries of `mask`. Masked entries are
/// exactly zero. A row with no admitted entries is an error.
pub fn masked_softmax(logits: &Tensor, mask: &BoolMask) -> Result<Tensor> {
    let (q, k) = logits.expect_2d("masked_softmax")?;
    if (mask.rows(), mask.cols()) != (q, k) {
        return Err(Error::dim(
            "masked_softmax",
            format!("logits [{q},{k}] vs mask [{},{}]", mask.rows(), mask.cols()),
        ));
    }
    let mut out = vec![0.0; q * k];
    for r in 0..q {
        if !softmax_row_masked(logits.row(r), mask.row(r), &mut out[r * k..(r + 1) * k]) {
            return Err(Error::Invariant(format!("softmax row {r} is fully masked")));
        }
    }
    Tensor::new(vec![q, k], out)
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (q, k) = logits.expect_2d("softmax")?;
    masked_softmax(logits, &BoolMask::all_true(q, k))
}

/// Gradient of the logits given the softmax output and its upstream gradient.
pub fn softmax_backward(probs: &Tensor, dprobs: &Tensor) -> Tensor {
    let k = probs.cols();
    let mut out = vec![0.0; probs.numel()];
    for ((p, g), d) in probs
        .data()
        .chunks(k)
        .zip(dprobs.data().chunks(k))
        .zip(out.chunks_mut(k))
    {
        softmax_row_backward(p, g, d);
    }
    Tensor::new(probs.shape().to_vec(), out).expect("shape")
}

// ---------------------------------------------------------------------------
// attention

/// Cached softmax weights of one attention call, one `[Q,K]` block per head.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub probs: Vec<f64>,
}

fn head_dim(d: usize, n_heads: usize) -> Result<usize> {
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Config(format!("{n_heads} heads do not divide model dim {d}")));
    }
    Ok(d / n_heads)
}

fn gather_head(src: &[f64], rows: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], rows: usize, d: usize, h: usize, dh: usize) {
    for r in 0..rows {
        for (o, s) in dst[r * d + h * dh..r * d + (h + 1) * dh]
            .iter_mut()
            .zip(&src[r * dh..(r + 1) * dh])
        {
            *o += s;
        }
    }
}

/// Slice-level attention used by both the tensor API and the batched graph op.
/// `q` is `[nq,d]`, `k`/`v` are `[nk,d]`; writes `[nq,d]` into `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_raw(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    mask: &BoolMask,
    nq: usize,
    nk: usize,
    d: usize,
    n_heads: usize,
    out: &mut [f64],
    probs_out: &mut [f64],
) -> Result<()> {
    let dh = head_dim(d, n_heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0; nq * nk];
    for h in 0..n_heads {
        let qh = gather_head(q, nq, d, h, dh);
        let kh = gather_head(k, nk, d, h, dh);
        let vh = gather_head(v, nk, d, h, dh);
        scores.iter_mut().for_each(|s| *s = 0.0);
        gemm_nt(&qh, &kh, &mut scores, nq, dh, nk);
        let probs = &mut probs_out[h * nq * nk..(h + 1) * nq * nk];
        for r in 0..nq {
            let row = &mut scores[r * nk..(r + 1) * nk];
            row.iter_mut().for_each(|s| *s *= scale);
            if !softmax_row_masked(row, mask.row(r), &mut probs[r * nk..(r + 1) * nk]) {
                return Err(Error::Invariant(format!("attention row {r} is fully masked")));
            }
        }
        let mut oh = vec![0.0; nq * dh];
        gemm_nn(probs, &vh, &mut oh, nq, nk, dh);
        scatter_head(out, &oh, nq, d, h, dh);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward_raw(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs_all: &[f64],
    dout: &[f64],
    nq: usize,
    nk: usize,
    d: usize,
    n_heads: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dprobs = vec![0.0; nq * nk];
    let mut dscores = vec![0.0; nq * nk];
    for h in 0..n_heads {
        let qh = gather_head(q, nq, d, h, dh);
        let kh = gather_head(k, nk, d, h, dh);
        let vh = gather_head(v, nk, d, h, dh);
        let doh = gather_head(dout, nq, d, h, dh);
        let probs = &probs_all[h * nq * nk..(h + 1) * nq * nk];

        let mut dvh = vec![0.0; nk * dh];
        gemm_tn(probs, &doh, &mut dvh, nq, nk, dh);
        scatter_head(dv, &dvh, nk, d, h, dh);

        dprobs.iter_mut().for_each(|x| *x = 0.0);
        gemm_nt(&doh, &vh, &mut dprobs, nq, dh, nk);
        for r in 0..nq {
            softmax_row_backward(
                &probs[r * nk..(r + 1) * nk],
                &dprobs[r * nk..(r + 1) * nk],
                &mut dscores[r * nk..(r + 1) * nk],
            );
        }
        dscores.iter_mut().for_each(|x| *x *= scale);

        let mut dqh = vec![0.0; nq * dh];
        gemm_nn(&dscores, &kh, &mut dqh, nq, nk, dh);
        scatter_head(dq, &dqh, nq, d, h, dh);
        let mut dkh = vec![0.0; nk * dh];
        gemm_tn(&dscores, &qh, &mut dkh, nq, nk, dh);
        scatter_head(dk, &dkh, nk, d, h, dh);
    }
}

/// Multi-head scaled dot-product attention. The same mask applies to every
/// head; head outputs are concatenated along the feature axis.
pub fn masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &BoolMask,
    n_heads: usize,
) -> Result<Tensor> {
    masked_attention_cached(q, k, v, mask, n_heads).map(|(out, _)| out)
}

pub fn masked_attention_cached(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &BoolMask,
    n_heads: usize,
) -> Result<(Tensor, AttentionCache)> {
    let (nq, d) = q.expect_2d("masked_attention")?;
    let (nk, dk) = k.expect_2d("masked_attention")?;
    if dk != d || v.shape() != k.shape() {
        return Err(Error::dim(
            "masked_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if (mask.rows(), mask.cols()) != (nq, nk) {
        return Err(Error::dim(
            "masked_attention",
            format!("mask [{},{}] vs [{nq},{nk}]", mask.rows(), mask.cols()),
        ));
    }
    head_dim(d, n_heads)?;
    let mut out = vec![0.0; nq * d];
    let mut probs = vec![0.0; n_heads * nq * nk];
    attention_raw(q.data(), k.data(), v.data(), mask, nq, nk, d, n_heads, &mut out, &mut probs)?;
    Ok((Tensor::new(vec![nq, d], out)?, AttentionCache { probs }))
}

pub fn masked_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cache: &AttentionCache,
    dout: &Tensor,
    n_heads: usize,
) -> (Tensor, Tensor, Tensor) {
    let (nq, d) = (q.rows(), q.cols());
    let nk = k.rows();
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    attention_backward_raw(
        q.data(),
        k.data(),
        v.data(),
        &cache.probs,
        dout.data(),
        nq,
        nk,
        d,
        n_heads,
        &mut dq,
        &mut dk,
        &mut dv,
    );
    (
        Tensor::new(vec![nq, d], dq).expect("shape"),
        Tensor::new(vec![nk, d], dk).expect("shape"),
        Tensor::new(vec![nk, d], dv).expect("shape"),
    )
}

// ---------------------------------------------------------------------------
// layer norm

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::dim("layer_norm", format!("affine {} vs features {d}", gamma.numel())));
    }
    let n = x.rows();
    let mut out = vec![0.0; n * d];
    let mut mean = Vec::with_capacity(n);
    let mut rstd = Vec::with_capacity(n);
    for (r, row) in x.data().chunks(d).enumerate() {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, &v) in row.iter().enumerate() {
            out[r * d + j] = (v - mu) * rs * gamma.data()[j] + beta.data()[j];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, LayerNormCache { mean, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    cache: &LayerNormCache,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = x.cols();
    let mut dx = vec![0.0; x.numel()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let g = gamma.data();
    for (r, (row, drow)) in x.data().chunks(d).zip(dout.data().chunks(d)).enumerate() {
        let (mu, rs) = (cache.mean[r], cache.rstd[r]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let xhat = (row[j] - mu) * rs;
            let dxhat = drow[j] * g[j];
            dgamma[j] += drow[j] * xhat;
            dbeta[j] += drow[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let xhat = (row[j] - mu) * rs;
            let dxhat = drow[j] * g[j];
            dx[r * d + j] = rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        Tensor::new(vec![d], dgamma).expect("shape"),
        Tensor::new(vec![d], dbeta).expect("shape"),
    )
}

// ---------------------------------------------------------------------------
// gelu (tanh approximation)

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

// libm's tanh goes through expm1 and dominates the MLP cost; one exp is
// accurate to a few ulps in absolute terms, which is all GELU needs.
fn tanh_fast(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh_fast(GELU_C * (x + 0.044715 * x * x * x)))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = tanh_fast(inner);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

pub fn gelu_backward(x: &Tensor, dout: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&v, &g)| g * gelu_grad_scalar(v))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape")
}

// ---------------------------------------------------------------------------
// l2 normalize

/// Row-wise unit normalization. Returns the output and the row norms.
pub fn l2_normalize(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let d = x.cols();
    let mut out = x.data().to_vec();
    let mut norms = Vec::with_capacity(x.rows());
    for (r, row) in out.chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Invariant(format!("cannot normalize row {r} with norm {norm}")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
        norms.push(norm);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, norms))
}

pub fn l2_normalize_backward(y: &Tensor, norms: &[f64], dout: &Tensor) -> Tensor {
    let d = y.cols();
    let mut dx = vec![0.0; y.numel()];
    for (r, ((yr, gr), dr)) in y
        .data()
        .chunks(d)
        .zip(dout.data().chunks(d))
        .zip(dx.chunks_mut(d))
        .enumerate()
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..d {
            dr[j] = (gr[j] - yr[j] * dot) / norms[r];
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("shape")
}
