//! Diagonal selective scan.
//!
//! ```text
//! h_s = exp(Δ_s A) ⊙ h_{s-1} + (Δ_s u_s) B_s
//! y_s = C_s · h_s + D ⊙ u_s
//! ```
//!
//! per channel `d` and state index `n`, with `A[d,n] < 0`.

use crate::error::{ensure_shape, Error, Result};
use crate::numerics::{CustomOp, Tape, Tensor, Var};

/// Hidden state carried across windows, `h[D_inner, N_state]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmState {
    pub h: Tensor,
}

impl SsmState {
    pub fn zeros(d_inner: usize, d_state: usize) -> Self {
        SsmState {
            h: Tensor::zeros(&[d_inner, d_state]),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h.shape()[0], self.h.shape()[1])
    }

    pub fn byte_size(&self) -> usize {
        self.h.byte_size()
    }
}

/// Fully materialized scan operands.
#[derive(Clone, Debug)]
pub struct ScanInputs {
    /// `[S, D_inner]`
    pub u: Tensor,
    /// Step sizes after softplus, `[S, D_inner]`.
    pub delta: Tensor,
    /// Continuous-time state matrix (negative), `[D_inner, N_state]`.
    pub a: Tensor,
    /// `[S, N_state]`
    pub b: Tensor,
    /// `[S, N_state]`
    pub c: Tensor,
    /// `[D_inner]`
    pub d_skip: Tensor,
}

impl ScanInputs {
    /// Returns `(S, D_inner, N_state)` after checking every operand.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let (s, di) = self.u.dims2()?;
        let (da, n) = self.a.dims2()?;
        ensure_shape!(s >= 1, "scan over an empty sequence");
        ensure_shape!(da == di, "A has {da} channels, input has {di}");
        ensure_shape!(self.delta.shape() == [s, di], "delta {:?} vs u {:?}", self.delta.shape(), self.u.shape());
        ensure_shape!(self.b.shape() == [s, n], "B {:?}, expected [{s}, {n}]", self.b.shape());
        ensure_shape!(self.c.shape() == [s, n], "C {:?}, expected [{s}, {n}]", self.c.shape());
        ensure_shape!(self.d_skip.shape() == [di], "D {:?}, expected [{di}]", self.d_skip.shape());
        Ok((s, di, n))
    }

    fn check_state(&self, h0: &SsmState) -> Result<(usize, usize, usize)> {
        let (s, di, n) = self.dims()?;
        if h0.h.shape() != [di, n] {
            return Err(Error::State(format!(
                "initial state {:?}, expected [{di}, {n}]",
                h0.h.shape()
            )));
        }
        Ok((s, di, n))
    }
}

/// Step-by-step recurrence.
pub fn scan_sequential(x: &ScanInputs, h0: &SsmState) -> Result<(Tensor, SsmState)> {
    let (s_len, di, n) = x.check_state(h0)?;
    let (u, dt, a, b, c, dsk) = (x.u.data(), x.delta.data(), x.a.data(), x.b.data(), x.c.data(), x.d_skip.data());
    let mut h = h0.h.data().to_vec();
    let mut y = vec![0.0; s_len * di];
    for s in 0..s_len {
        let bs = &b[s * n..(s + 1) * n];
        let cs = &c[s * n..(s + 1) * n];
        for d in 0..di {
            let us = u[s * di + d];
            let ds = dt[s * di + d];
            let hd = &mut h[d * n..(d + 1) * n];
            let ad = &a[d * n..(d + 1) * n];
            let mut acc = dsk[d] * us;
            for k in 0..n {
                hd[k] = (ds * ad[k]).exp() * hd[k] + ds * us * bs[k];
                acc += cs[k] * hd[k];
            }
            y[s * di + d] = acc;
        }
    }
    Ok((
        Tensor::new(vec![s_len, di], y)?,
        SsmState {
            h: Tensor::new(vec![di, n], h)?,
        },
    ))
}

/// Chunked evaluation: inside a chunk every state is written in closed
/// form from the chunk's entry state using cumulative log-decays,
///
/// ```text
/// h_s = exp(Λ_s) h_in + Σ_{r ≤ s} exp(Λ_s − Λ_r) Δ_r u_r B_r,   Λ_s = Σ_{r ≤ s} Δ_r A
/// ```
///
/// and only the chunk's final state is carried forward.
pub fn scan_chunked(x: &ScanInputs, h0: &SsmState, chunk: usize) -> Result<(Tensor, SsmState)> {
    if chunk == 0 {
        return Err(Error::Config("chunk size must be at least 1".into()));
    }
    let (s_len, di, n) = x.check_state(h0)?;
    let (u, dt, a, b, c, dsk) = (x.u.data(), x.delta.data(), x.a.data(), x.b.data(), x.c.data(), x.d_skip.data());
    let mut h = h0.h.data().to_vec();
    let mut y = vec![0.0; s_len * di];
    for s in 0..s_len {
        for d in 0..di {
            y[s * di + d] = dsk[d] * u[s * di + d];
        }
    }
    let mut lam = vec![0.0; chunk];
    let mut drive = vec![0.0; chunk];
    let mut start = 0;
    while start < s_len {
        let len = chunk.min(s_len - start);
        for d in 0..di {
            for k in 0..n {
                let adk = a[d * n + k];
                let mut acc = 0.0;
                for j in 0..len {
                    let s = start + j;
                    acc += dt[s * di + d] * adk;
                    lam[j] = acc;
                    drive[j] = dt[s * di + d] * u[s * di + d] * b[s * n + k];
                }
                let h_in = h[d * n + k];
                let mut last = h_in;
                for j in 0..len {
                    let mut hs = lam[j].exp() * h_in;
                    for r in 0..=j {
                        hs += (lam[j] - lam[r]).exp() * drive[r];
                    }
                    y[(start + j) * di + d] += c[(start + j) * n + k] * hs;
                    last = hs;
                }
                h[d * n + k] = last;
            }
        }
        start += len;
    }
    Ok((
        Tensor::new(vec![s_len, di], y)?,
        SsmState {
            h: Tensor::new(vec![di, n], h)?,
        },
    ))
}

/// Reverse-mode rule for the scan. Inputs are
/// `[u, delta, a, b, c, d_skip, h0]`; the output packs `y` followed by the
/// final state as one `[S·D_inner + D_inner·N_state, 1]` column.
struct ScanOp;

impl CustomOp for ScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = ScanInputs {
            u: inputs[0].clone(),
            delta: inputs[1].clone(),
            a: inputs[2].clone(),
            b: inputs[3].clone(),
            c: inputs[4].clone(),
            d_skip: inputs[5].clone(),
        };
        let h0 = inputs[6];
        let (s_len, di, n) = x.dims()?;
        let (u, dt, a, b, c, dsk) = (x.u.data(), x.delta.data(), x.a.data(), x.b.data(), x.c.data(), x.d_skip.data());
        let gy = &grad.data()[..s_len * di];
        let ghs = &grad.data()[s_len * di..];

        // states[s] holds h after step s; states[0] is h0.
        let mut states = Vec::with_capacity((s_len + 1) * di * n);
        states.extend_from_slice(h0.data());
        for s in 0..s_len {
            let prev = s * di * n;
            for d in 0..di {
                let us = u[s * di + d];
                let ds = dt[s * di + d];
                for k in 0..n {
                    let hp = states[prev + d * n + k];
                    states.push((ds * a[d * n + k]).exp() * hp + ds * us * b[s * n + k]);
                }
            }
        }

        let mut gu = vec![0.0; s_len * di];
        let mut gdt = vec![0.0; s_len * di];
        let mut ga = vec![0.0; di * n];
        let mut gb = vec![0.0; s_len * n];
        let mut gc = vec![0.0; s_len * n];
        let mut gd = vec![0.0; di];
        let mut gh = ghs.to_vec();
        for s in (0..s_len).rev() {
            let cur = &states[(s + 1) * di * n..(s + 2) * di * n];
            let prev = &states[s * di * n..(s + 1) * di * n];
            for d in 0..di {
                let us = u[s * di + d];
                let ds = dt[s * di + d];
                let g = gy[s * di + d];
                gd[d] += g * us;
                gu[s * di + d] += g * dsk[d];
                let mut g_dt = 0.0;
                let mut g_u = 0.0;
                for k in 0..n {
                    let i = d * n + k;
                    gc[s * n + k] += g * cur[i];
                    gh[i] += g * c[s * n + k];
                    let e = (ds * a[i]).exp();
                    let bk = b[s * n + k];
                    g_dt += gh[i] * (a[i] * e * prev[i] + us * bk);
                    ga[i] += gh[i] * ds * e * prev[i];
                    g_u += gh[i] * ds * bk;
                    gb[s * n + k] += gh[i] * ds * us;
                    gh[i] *= e;
                }
                gdt[s * di + d] += g_dt;
                gu[s * di + d] += g_u;
            }
        }
        Ok(vec![
            Some(Tensor::new(vec![s_len, di], gu)?),
            Some(Tensor::new(vec![s_len, di], gdt)?),
            Some(Tensor::new(vec![di, n], ga)?),
            Some(Tensor::new(vec![s_len, n], gb)?),
            Some(Tensor::new(vec![s_len, n], gc)?),
            Some(Tensor::new(vec![di], gd)?),
            Some(Tensor::new(vec![di, n], gh)?),
        ])
    }
}

/// Taped scan over already-materialized operands. Returns `(y, h_S)`.
#[allow(clippy::too_many_arguments)]
pub fn scan_on_tape(
    tape: &mut Tape,
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d_skip: Var,
    h0: Var,
) -> Result<(Var, Var)> {
    let x = ScanInputs {
        u: tape.value(u).clone(),
        delta: tape.value(delta).clone(),
        a: tape.value(a).clone(),
        b: tape.value(b).clone(),
        c: tape.value(c).clone(),
        d_skip: tape.value(d_skip).clone(),
    };
    let (y, hs) = scan_sequential(&x, &SsmState { h: tape.value(h0).clone() })?;
    let (s_len, di) = y.dims2()?;
    let n = hs.h.shape()[1];
    let mut packed = y.into_data();
    packed.extend_from_slice(hs.h.data());
    let out = Tensor::new(vec![s_len * di + di * n, 1], packed)?;
    let packed = tape.custom(Box::new(ScanOp), &[u, delta, a, b, c, d_skip, h0], out);
    let y = tape.slice_rows(packed, 0, s_len * di)?;
    let y = tape.reshape(y, &[s_len, di])?;
    let h = tape.slice_rows(packed, s_len * di, di * n)?;
    let h = tape.reshape(h, &[di, n])?;
    Ok((y, h))
}
