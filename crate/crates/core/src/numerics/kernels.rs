//! Forward and vector-Jacobian kernels on plain tensors.
//!
//! The tape in [`super::tape`] records which of these ran; the `*_backward`
//! functions are the matching VJPs. Matrices are row-major `[rows, cols]`.

use super::{Real, Tensor};
use crate::error::{ensure_shape, Error, Result};

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    ensure_shape!(k == k2, "matmul inner dims differ: [{m},{k}] x [{k2},{n}]");
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = ad[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m,n] · b[k,n]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let (k, n2) = b.dims2()?;
    ensure_shape!(n == n2, "matmul_nt column mismatch: {n} vs {n2}");
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..k {
            out[i * k + j] = dot(ar, b.row(j));
        }
    }
    Tensor::new(vec![m, k], out)
}

/// `a[m,k]ᵀ · c[m,n]`.
pub fn matmul_tn(a: &Tensor, c: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (m2, n) = c.dims2()?;
    ensure_shape!(m == m2, "matmul_tn row mismatch: {m} vs {m2}");
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let ar = a.row(i);
        let cr = c.row(i);
        for (p, &s) in ar.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            for (o, &cv) in out[p * n..(p + 1) * n].iter_mut().zip(cr) {
                *o += s * cv;
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

#[inline]
pub(crate) fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: Real) -> Real {
    x * sigmoid(x)
}

pub fn silu_grad(x: Real) -> Real {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn erf(x: Real) -> Real {
    libm::erf(x as f64) as Real
}

const FRAC_1_SQRT_2: Real = std::f64::consts::FRAC_1_SQRT_2 as Real;
const FRAC_1_SQRT_2PI: Real = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: Real) -> Real {
    0.5 * x * (1.0 + erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: Real) -> Real {
    let cdf = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub fn softplus(x: Real) -> Real {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive `y`.
pub fn softplus_inv(y: Real) -> Real {
    y.exp_m1().ln()
}

/// Per-row normalization of `x[S,D]` followed by the affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: Real) -> Result<Tensor> {
    let (s, d) = x.dims2()?;
    ensure_shape!(
        gamma.shape() == [d] && beta.shape() == [d],
        "layer_norm affine params must be [{d}], got {:?} and {:?}",
        gamma.shape(),
        beta.shape()
    );
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(s * d);
    for i in 0..s {
        let row = x.row(i);
        let (mean, rstd) = row_stats(row, eps);
        out.extend((0..d).map(|j| (row[j] - mean) * rstd * g[j] + b[j]));
    }
    Tensor::new(vec![s, d], out)
}

fn row_stats(row: &[Real], eps: Real) -> (Real, Real) {
    let d = row.len() as Real;
    let mean = row.iter().sum::<Real>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    eps: Real,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (s, d) = x.dims2()?;
    let g = gamma.data();
    let mut dx = vec![0.0; s * d];
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..s {
        let row = x.row(i);
        let dyr = dy.row(i);
        let (mean, rstd) = row_stats(row, eps);
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            dxhat[j] = dyr[j] * g[j];
            dg[j] += dyr[j] * xhat[j];
            db[j] += dyr[j];
        }
        let mean_dxhat = dxhat.iter().sum::<Real>() / d as Real;
        let mean_dxhat_xhat = dot(&dxhat, &xhat) / d as Real;
        for j in 0..d {
            dx[i * d + j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    Ok((
        Tensor::new(vec![s, d], dx)?,
        Tensor::new(vec![d], dg)?,
        Tensor::new(vec![d], db)?,
    ))
}

/// Causal depthwise convolution over the sequence axis of `x[S,D]`.
///
/// Output row `s` only sees rows `s-k+1 ..= s`; rows before the start are
/// zero padding. `kernel[k-1]` is the tap on the current position.
pub fn depthwise_conv1d_causal(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (s, d) = x.dims2()?;
    let (k, kd) = kernel.dims2()?;
    ensure_shape!(
        kd == d && bias.shape() == [d],
        "depthwise kernel [{k},{kd}] / bias {:?} do not match {d} channels",
        bias.shape()
    );
    ensure_shape!(k >= 1, "kernel width must be at least 1");
    let (xd, kw, bd) = (x.data(), kernel.data(), bias.data());
    let mut out = Vec::with_capacity(s * d);
    for pos in 0..s {
        for c in 0..d {
            let mut acc = bd[c];
            for j in 0..k {
                // source row = pos - (k - 1) + j
                if let Some(src) = (pos + j + 1).checked_sub(k) {
                    acc += kw[j * d + c] * xd[src * d + c];
                }
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![s, d], out)
}

/// Returns `(dx, dkernel, dbias)`.
pub fn depthwise_conv1d_causal_backward(
    x: &Tensor,
    kernel: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (s, d) = x.dims2()?;
    let (k, _) = kernel.dims2()?;
    let (xd, kw, g) = (x.data(), kernel.data(), dy.data());
    let mut dx = vec![0.0; s * d];
    let mut dk = vec![0.0; k * d];
    let mut db = vec![0.0; d];
    for pos in 0..s {
        for c in 0..d {
            let go = g[pos * d + c];
            db[c] += go;
            for j in 0..k {
                if let Some(src) = (pos + j + 1).checked_sub(k) {
                    dx[src * d + c] += kw[j * d + c] * go;
                    dk[j * d + c] += xd[src * d + c] * go;
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![s, d], dx)?,
        Tensor::new(vec![k, d], dk)?,
        Tensor::new(vec![d], db)?,
    ))
}

/// Single-head scaled dot-product attention, `softmax(Q Kᵀ / sqrt(d_k)) V`.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    multi_head_attention(q, k, v, 1).map(|(out, _)| out)
}

/// Scaled dot-product attention with `heads` column groups.
///
/// Head `h` uses columns `h*dk..(h+1)*dk` of `q`/`k` and `h*dv..(h+1)*dv` of
/// `v`. Returns the output and the per-(row, head) log-sum-exp of the
/// scaled logits, which is all the backward pass needs to rebuild the
/// attention weights one row at a time.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
) -> Result<(Tensor, Vec<Real>)> {
    let (sq, dq) = q.dims2()?;
    let (sk, dkk) = k.dims2()?;
    let (sv, dv_all) = v.dims2()?;
    if sk == 0 {
        return Err(Error::EmptyContext);
    }
    ensure_shape!(
        dq == dkk && sk == sv,
        "attention shapes incompatible: Q [{sq},{dq}] K [{sk},{dkk}] V [{sv},{dv_all}]"
    );
    ensure_shape!(
        heads >= 1 && dq % heads == 0 && dv_all % heads == 0,
        "{heads} heads do not divide key dim {dq} / value dim {dv_all}"
    );
    let dk = dq / heads;
    let dv = dv_all / heads;
    let scale = 1.0 / (dk as Real).sqrt();
    let mut out = vec![0.0; sq * dv_all];
    let mut lse = vec![0.0; sq * heads];
    let mut logits = vec![0.0; sk];
    for i in 0..sq {
        let qr = q.row(i);
        for h in 0..heads {
            let qh = &qr[h * dk..(h + 1) * dk];
            let mut max = Real::NEG_INFINITY;
            for (j, l) in logits.iter_mut().enumerate() {
                *l = dot(qh, &k.row(j)[h * dk..(h + 1) * dk]) * scale;
                max = max.max(*l);
            }
            let mut denom = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                denom += *l;
            }
            let o = &mut out[i * dv_all + h * dv..i * dv_all + (h + 1) * dv];
            for (j, &w) in logits.iter().enumerate() {
                let p = w / denom;
                for (oc, &vc) in o.iter_mut().zip(&v.row(j)[h * dv..(h + 1) * dv]) {
                    *oc += p * vc;
                }
            }
            lse[i * heads + h] = max + denom.ln();
        }
    }
    Ok((Tensor::new(vec![sq, dv_all], out)?, lse))
}

/// Returns `(dq, dk, dv)`; attention weights are recomputed from `lse`.
pub fn multi_head_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    out: &Tensor,
    lse: &[Real],
    heads: usize,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (sq, dq_all) = q.dims2()?;
    let (sk, _) = k.dims2()?;
    let (_, dv_all) = v.dims2()?;
    let dk = dq_all / heads;
    let dv = dv_all / heads;
    let scale = 1.0 / (dk as Real).sqrt();
    let mut gq = vec![0.0; sq * dq_all];
    let mut gk = vec![0.0; sk * dq_all];
    let mut gv = vec![0.0; sk * dv_all];
    for i in 0..sq {
        let qr = q.row(i);
        let dor = dout.row(i);
        let or = out.row(i);
        for h in 0..heads {
            let qh = &qr[h * dk..(h + 1) * dk];
            let doh = &dor[h * dv..(h + 1) * dv];
            let row_delta = dot(doh, &or[h * dv..(h + 1) * dv]);
            let m = lse[i * heads + h];
            for j in 0..sk {
                let kh = &k.row(j)[h * dk..(h + 1) * dk];
                let p = (dot(qh, kh) * scale - m).exp();
                let vh = &v.row(j)[h * dv..(h + 1) * dv];
                let dp = dot(doh, vh);
                let ds = p * (dp - row_delta) * scale;
                for c in 0..dk {
                    gq[i * dq_all + h * dk + c] += ds * kh[c];
                    gk[j * dq_all + h * dk + c] += ds * qh[c];
                }
                for c in 0..dv {
                    gv[j * dv_all + h * dv + c] += p * doh[c];
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![sq, dq_all], gq)?,
        Tensor::new(vec![sk, dq_all], gk)?,
        Tensor::new(vec![sk, dv_all], gv)?,
    ))
}
