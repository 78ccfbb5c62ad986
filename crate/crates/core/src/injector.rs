//! Zero-initialized side branches that add memory tokens to attention keys
//! and values.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::numerics::{softmax_attention, Real, Rng, Tape, Tensor, Var};
use crate::params::{bind_frozen, join, Linear, ParamTree};

/// Std of the normal init for the first layer of each branch.
pub const HIDDEN_INIT_STD: Real = 0.02;

/// Two position-wise channel maps with a GELU between.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T = Tensor> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> ParamTree<T> for Branch<T> {
    type Mapped<U> = Branch<U>;
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Branch<U> {
        Branch {
            w1: f(&join(prefix, "W1"), &self.w1),
            b1: f(&join(prefix, "b1"), &self.b1),
            w2: f(&join(prefix, "W2"), &self.w2),
            b2: f(&join(prefix, "b2"), &self.b2),
        }
    }
}

/// How the output layer of a branch starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputInit {
    #[default]
    Zero,
    /// Uniform in ±1/sqrt(fan_in), as an ordinary dense layer would start.
    Random,
}

impl Branch<Tensor> {
    /// The output layer draws from `out_rng` only, so switching `out` leaves
    /// the hidden layer's values unchanged.
    pub fn init(d: usize, d_mid: usize, out: OutputInit, rng: &mut Rng, out_rng: &mut Rng) -> Self {
        let hidden = Linear::randn(d, d_mid, HIDDEN_INIT_STD, rng);
        let b1 = Tensor::randn(&[d_mid], HIDDEN_INIT_STD, rng);
        let output = match out {
            OutputInit::Zero => Linear::zeros(d_mid, d),
            OutputInit::Random => Linear::kaiming_uniform(d_mid, d, out_rng),
        };
        Branch {
            w1: hidden.w,
            b1,
            w2: output.w,
            b2: output.b,
        }
    }
}

impl Branch<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.linear(x, self.w1, self.b1)?;
        let h = tape.gelu(h);
        tape.linear(h, self.w2, self.b2)
    }
}

/// Branches for one injected backbone layer.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectorLayer<T = Tensor> {
    /// Index of the backbone block this layer feeds.
    pub layer: usize,
    pub k: Branch<T>,
    pub v: Branch<T>,
}

impl<T> ParamTree<T> for InjectorLayer<T> {
    type Mapped<U> = InjectorLayer<U>;
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> InjectorLayer<U> {
        InjectorLayer {
            layer: self.layer,
            k: self.k.map_named(&join(prefix, "K"), f),
            v: self.v.map_named(&join(prefix, "V"), f),
        }
    }
}

impl InjectorLayer<Var> {
    /// `K + branch_K(K_hat)`, `V + branch_V(V_hat)`.
    pub fn inject(&self, tape: &mut Tape, k: Var, v: Var, k_hat: Var, v_hat: Var) -> Result<(Var, Var)> {
        for (name, base, mem) in [("K", k, k_hat), ("V", v, v_hat)] {
            let (a, b) = (tape.shape(base), tape.shape(mem));
            if a != b {
                return Err(Error::Alignment(format!(
                    "{name}: backbone tokens {a:?} vs memory tokens {b:?}"
                )));
            }
        }
        let dk = self.k.apply(tape, k_hat)?;
        let dv = self.v.apply(tape, v_hat)?;
        Ok((tape.add(k, dk)?, tape.add(v, dv)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InjectorParams<T = Tensor> {
    pub layers: Vec<InjectorLayer<T>>,
}

impl<T> ParamTree<T> for InjectorParams<T> {
    type Mapped<U> = InjectorParams<U>;
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> InjectorParams<U> {
        InjectorParams {
            layers: self
                .layers
                .iter()
                .map(|l| l.map_named(&join(prefix, &format!("layer{}", l.layer)), f))
                .collect(),
        }
    }
}

impl InjectorParams<Tensor> {
    pub fn init(layers: &[usize], d: usize, d_mid: usize, out: OutputInit, rng: &mut Rng, out_rng: &mut Rng) -> Self {
        let mut sorted = layers.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        InjectorParams {
            layers: sorted
                .into_iter()
                .map(|layer| InjectorLayer {
                    layer,
                    k: Branch::init(d, d_mid, out, rng, out_rng),
                    v: Branch::init(d, d_mid, out, rng, out_rng),
                })
                .collect(),
        }
    }
}

impl<T> InjectorParams<T> {
    pub fn layer(&self, index: usize) -> Option<&InjectorLayer<T>> {
        self.layers.iter().find(|l| l.layer == index)
    }
}

/// Where memory tokens enter the attention context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Add the current window's refined tokens to the aligned K/V rows.
    #[default]
    TrailingSlice,
    /// As above, and additionally append the refined history tokens (passed
    /// through the branches) as extra K/V rows.
    AppendHistory,
}

pub fn zero_conv_branch(x: &Tensor, branch: &Branch) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    let (d_in, _) = branch.w1.dims2()?;
    ensure_shape!(d == d_in, "branch expects width {d_in}, got {d}");
    let mut tape = Tape::new();
    let b = bind_frozen(branch, &mut tape);
    let xv = tape.constant(x.clone());
    let y = b.apply(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

pub fn inject_kv(
    k: &Tensor,
    v: &Tensor,
    k_hat: &Tensor,
    v_hat: &Tensor,
    layer: &InjectorLayer,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let l = bind_frozen(layer, &mut tape);
    let [k, v, k_hat, v_hat] = [k, v, k_hat, v_hat].map(|t| tape.constant(t.clone()));
    let (k2, v2) = l.inject(&mut tape, k, v, k_hat, v_hat)?;
    Ok((tape.value(k2).clone(), tape.value(v2).clone()))
}

pub fn attend_with_memory(q: &Tensor, k_injected: &Tensor, v_injected: &Tensor) -> Result<Tensor> {
    softmax_attention(q, k_injected, v_injected)
}
