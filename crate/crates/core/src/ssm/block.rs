use serde::{Deserialize, Serialize};

use super::scan::{scan_chunked, scan_on_tape, scan_sequential, ScanInputs, SsmState};
use crate::error::{ensure_shape, Result};
use crate::numerics::kernels::{self, softplus_inv};
use crate::numerics::{Real, Rng, Tape, Tensor, Var};
use crate::params::{bind_frozen, join, LayerNormParams, Linear, ParamTree};

/// Step size produced by the Δ projection at initialization.
pub const DELTA_INIT: Real = 0.1;

/// Selective SSM parameters for `D_inner` channels and `N_state` states.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T = Tensor> {
    /// `A = -exp(a_log)`, `[D_inner, N_state]`.
    pub a_log: T,
    pub b_proj: Linear<T>,
    pub c_proj: Linear<T>,
    pub delta_proj: Linear<T>,
    /// `[D_inner]`
    pub d_skip: T,
}

impl<T> ParamTree<T> for SsmParams<T> {
    type Mapped<U> = SsmParams<U>;
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> SsmParams<U> {
        SsmParams {
            a_log: f(&join(prefix, "A_log"), &self.a_log),
            b_proj: self.b_proj.map_named(&join(prefix, "B_proj"), f),
            c_proj: self.c_proj.map_named(&join(prefix, "C_proj"), f),
            delta_proj: self.delta_proj.map_named(&join(prefix, "delta_proj"), f),
            d_skip: f(&join(prefix, "D_skip"), &self.d_skip),
        }
    }
}

impl SsmParams<Tensor> {
    /// `A_log[d,n] = ln(n+1)`, Δ bias so that softplus gives [`DELTA_INIT`].
    pub fn init(d_inner: usize, d_state: usize, rng: &mut Rng) -> Self {
        let a_log = Tensor::from_fn(&[d_inner, d_state], |i| ((i % d_state) as Real + 1.0).ln());
        let std = 1.0 / (d_inner as Real).sqrt();
        let mut delta_proj = Linear::randn(d_inner, d_inner, 0.02, rng);
        delta_proj.b = Tensor::full(&[d_inner], softplus_inv(DELTA_INIT));
        SsmParams {
            a_log,
            b_proj: Linear::randn(d_inner, d_state, std, rng),
            c_proj: Linear::randn(d_inner, d_state, std, rng),
            delta_proj,
            d_skip: Tensor::ones(&[d_inner]),
        }
    }

    pub fn dims(&self) -> Result<(usize, usize)> {
        let (di, n) = self.a_log.dims2()?;
        Ok((di, n))
    }

    /// Materialize Δ, A, B, C for input `u[S, D_inner]`.
    pub fn scan_inputs(&self, u: &Tensor) -> Result<ScanInputs> {
        let (di, _) = self.dims()?;
        let (_, du) = u.dims2()?;
        ensure_shape!(du == di, "scan input has {du} channels, parameters have {di}");
        Ok(ScanInputs {
            u: u.clone(),
            delta: self.delta_proj.forward(u)?.map(kernels::softplus),
            a: self.a_log.map(|v| -v.exp()),
            b: self.b_proj.forward(u)?,
            c: self.c_proj.forward(u)?,
            d_skip: self.d_skip.clone(),
        })
    }
}

impl SsmParams<Var> {
    pub fn scan(&self, tape: &mut Tape, u: Var, h0: Var) -> Result<(Var, Var)> {
        let pre = self.delta_proj.apply(tape, u)?;
        let delta = tape.softplus(pre);
        let e = tape.exp(self.a_log);
        let a = tape.neg(e);
        let b = self.b_proj.apply(tape, u)?;
        let c = self.c_proj.apply(tape, u)?;
        scan_on_tape(tape, u, delta, a, b, c, self.d_skip, h0)
    }
}

pub fn selective_scan_sequential(u: &Tensor, params: &SsmParams, h0: &SsmState) -> Result<(Tensor, SsmState)> {
    scan_sequential(&params.scan_inputs(u)?, h0)
}

pub fn selective_scan_chunked(
    u: &Tensor,
    params: &SsmParams,
    h0: &SsmState,
    chunk: usize,
) -> Result<(Tensor, SsmState)> {
    scan_chunked(&params.scan_inputs(u)?, h0, chunk)
}

/// What the block's residual adds back.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residual {
    /// The raw read-out `M_prev`.
    #[default]
    Input,
    /// The layer-normalized read-out.
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub conv_width: usize,
    pub residual: Residual,
}

impl MambaConfig {
    pub fn new(d_model: usize) -> Self {
        MambaConfig {
            d_model,
            d_inner: 2 * d_model,
            d_state: 16,
            conv_width: 4,
            residual: Residual::Input,
        }
    }
}

/// Parameters of one temporal encoding block.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlockParams<T = Tensor> {
    pub norm: LayerNormParams<T>,
    /// `D → D_inner`, feeds the convolution and the scan.
    pub in_proj: Linear<T>,
    /// `[k, D_inner]`, last tap is the current position.
    pub conv_kernel: T,
    pub conv_bias: T,
    /// `D → D`, the multiplicative branch.
    pub gate_proj: Linear<T>,
    pub ssm: SsmParams<T>,
    /// `D_inner → D`
    pub out_proj: Linear<T>,
    pub residual: Residual,
}

impl<T> ParamTree<T> for MambaBlockParams<T> {
    type Mapped<U> = MambaBlockParams<U>;
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> MambaBlockParams<U> {
        MambaBlockParams {
            norm: self.norm.map_named(&join(prefix, "norm"), f),
            in_proj: self.in_proj.map_named(&join(prefix, "in_proj"), f),
            conv_kernel: f(&join(prefix, "conv.kernel"), &self.conv_kernel),
            conv_bias: f(&join(prefix, "conv.bias"), &self.conv_bias),
            gate_proj: self.gate_proj.map_named(&join(prefix, "gate_proj"), f),
            ssm: self.ssm.map_named(&join(prefix, "ssm"), f),
            out_proj: self.out_proj.map_named(&join(prefix, "out_proj"), f),
            residual: self.residual,
        }
    }
}

impl MambaBlockParams<Tensor> {
    pub fn init(cfg: &MambaConfig, rng: &mut Rng) -> Self {
        let (d, di, k) = (cfg.d_model, cfg.d_inner, cfg.conv_width);
        let sd = 1.0 / (d as Real).sqrt();
        MambaBlockParams {
            norm: LayerNormParams::identity(d),
            in_proj: Linear::randn(d, di, sd, rng),
            conv_kernel: Tensor::uniform(&[k, di], 1.0 / (k as Real).sqrt(), rng),
            conv_bias: Tensor::zeros(&[di]),
            gate_proj: Linear::randn(d, d, sd, rng),
            ssm: SsmParams::init(di, cfg.d_state, rng),
            out_proj: Linear::randn(di, d, 1.0 / (di as Real).sqrt(), rng),
            residual: cfg.residual,
        }
    }

    pub fn d_model(&self) -> usize {
        self.norm.gamma.shape()[0]
    }

    pub fn zero_state(&self) -> SsmState {
        let s = self.ssm.a_log.shape();
        SsmState::zeros(s[0], s[1])
    }
}

impl MambaBlockParams<Var> {
    /// Taped block; returns `(F_hat, h_S)`.
    pub fn forward(&self, tape: &mut Tape, m_prev: Var, h0: Var) -> Result<(Var, Var)> {
        let (_, d) = tape.value(m_prev).dims2()?;
        let dp = tape.value(self.norm.gamma).shape()[0];
        ensure_shape!(d == dp, "read-out has width {d}, block expects {dp}");
        let x = self.norm.apply(tape, m_prev)?;
        let z = self.in_proj.apply(tape, x)?;
        let z = tape.depthwise_conv1d_causal(z, self.conv_kernel, self.conv_bias)?;
        let a = tape.silu(z);
        let g = self.gate_proj.apply(tape, x)?;
        let b = tape.silu(g);
        let (y, h) = self.ssm.scan(tape, a, h0)?;
        let o = self.out_proj.apply(tape, y)?;
        let gated = tape.mul(o, b)?;
        let skip = match self.residual {
            Residual::Input => m_prev,
            Residual::Normalized => x,
        };
        Ok((tape.add(gated, skip)?, h))
    }
}

/// Inference-mode block on plain tensors.
pub fn mamba_block(m_prev: &Tensor, params: &MambaBlockParams, h0: &SsmState) -> Result<(Tensor, SsmState)> {
    let mut tape = Tape::new();
    let p = bind_frozen(params, &mut tape);
    let x = tape.constant(m_prev.clone());
    let h = tape.constant(h0.h.clone());
    let (f, hs) = p.forward(&mut tape, x, h)?;
    Ok((tape.value(f).clone(), SsmState { h: tape.value(hs).clone() }))
}
