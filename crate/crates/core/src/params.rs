//! Named parameter trees.
//!
//! Parameter structs are generic over their leaf type: `Foo<Tensor>` holds
//! values, `Foo<Var>` is the same tree bound onto a [`Tape`]. A single
//! `map_named` walk per struct gives naming, binding, loading, hashing and
//! optimizer updates.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{ensure_shape, Error, Result};
use crate::numerics::{Real, Rng, Tape, Tensor, Var};

pub trait ParamTree<T> {
    type Mapped<U>;

    /// Rebuild the tree with every leaf replaced by `f(full_name, leaf)`.
    /// Leaves are visited in a fixed order.
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U>;
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn visit<T, P: ParamTree<T>>(tree: &P, prefix: &str, mut f: impl FnMut(&str, &T)) {
    tree.map_named(prefix, &mut |n, t| f(n, t));
}

pub fn named_tensors<P: ParamTree<Tensor>>(tree: &P, prefix: &str) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    visit(tree, prefix, |n, t| out.push((n.to_string(), t.clone())));
    out
}

pub fn param_count<P: ParamTree<Tensor>>(tree: &P) -> usize {
    let mut n = 0;
    visit(tree, "", |_, t| n += t.len());
    n
}

/// Put every leaf on the tape; leaves for which `trainable` is false become
/// constants.
pub fn bind<P: ParamTree<Tensor>>(
    tree: &P,
    prefix: &str,
    tape: &mut Tape,
    trainable: impl Fn(&str) -> bool,
) -> P::Mapped<Var> {
    tree.map_named(prefix, &mut |n, t| {
        if trainable(n) {
            tape.var(t.clone())
        } else {
            tape.constant(t.clone())
        }
    })
}

/// Bind every leaf as a constant.
pub fn bind_frozen<P: ParamTree<Tensor>>(tree: &P, tape: &mut Tape) -> P::Mapped<Var> {
    bind(tree, "", tape, |_| false)
}

/// Leaf values in walk order.
pub fn leaves<P: ParamTree<Tensor>>(tree: &P) -> Vec<Tensor> {
    let mut out = Vec::new();
    visit(tree, "", |_, t| out.push(t.clone()));
    out
}

/// Rebuild `tree`'s structure from `values` given in walk order, the
/// inverse of [`leaves`].
pub fn with_leaves<T, U: Clone, P: ParamTree<T>>(tree: &P, values: &[U]) -> Result<P::Mapped<U>> {
    let mut count = 0;
    visit(tree, "", |_, _| count += 1);
    ensure_shape!(count == values.len(), "{} values for {count} leaves", values.len());
    let mut it = values.iter();
    Ok(tree.map_named("", &mut |_, _| it.next().expect("counted").clone()))
}

/// Replace each leaf of `template` with the same-named tensor from `source`.
pub fn load<P>(template: &P, prefix: &str, source: &BTreeMap<String, Tensor>) -> Result<P>
where
    P: ParamTree<Tensor, Mapped<Tensor> = P>,
{
    let mut err = None;
    let out = template.map_named(prefix, &mut |n, t| match source.get(n) {
        Some(s) if s.shape() == t.shape() => s.clone(),
        Some(s) => {
            err.get_or_insert_with(|| {
                Error::Format(format!(
                    "`{n}` has shape {:?}, expected {:?}",
                    s.shape(),
                    t.shape()
                ))
            });
            t.clone()
        }
        None => {
            err.get_or_insert_with(|| Error::Format(format!("missing parameter `{n}`")));
            t.clone()
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// SHA-256 over names, shapes and little-endian payloads, in walk order.
pub fn content_hash<P: ParamTree<Tensor>>(tree: &P, prefix: &str) -> String {
    let mut h = Sha256::new();
    visit(tree, prefix, |n, t| {
        h.update(n.as_bytes());
        for &e in t.shape() {
            h.update((e as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update((v as f64).to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

/// Affine map `x·w + b`, `w[D_in, D_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    pub w: T,
    pub b: T,
}

impl<T> ParamTree<T> for Linear<T> {
    type Mapped<U> = Linear<U>;
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            w: f(&join(prefix, "w"), &self.w),
            b: f(&join(prefix, "b"), &self.b),
        }
    }
}

impl Linear<Tensor> {
    /// Normal weights with standard deviation `std`, zero bias.
    pub fn randn(d_in: usize, d_out: usize, std: Real, rng: &mut Rng) -> Self {
        Linear {
            w: Tensor::randn(&[d_in, d_out], std, rng),
            b: Tensor::zeros(&[d_out]),
        }
    }

    /// Uniform in ±1/sqrt(d_in) for weights and bias, the usual default
    /// for an untuned dense layer.
    pub fn kaiming_uniform(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_in as Real).sqrt();
        Linear {
            w: Tensor::uniform(&[d_in, d_out], bound, rng),
            b: Tensor::uniform(&[d_out], bound, rng),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(&[d_in, d_out]),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn dims(&self) -> Result<(usize, usize)> {
        let (i, o) = self.w.dims2()?;
        ensure_shape!(self.b.shape() == [o], "bias {:?} vs output dim {o}", self.b.shape());
        Ok((i, o))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = bind_frozen(self, &mut tape);
        let y = p.apply(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

impl Linear<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.w, self.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}

impl<T> ParamTree<T> for LayerNormParams<T> {
    type Mapped<U> = LayerNormParams<U>;
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gamma: f(&join(prefix, "gamma"), &self.gamma),
            beta: f(&join(prefix, "beta"), &self.beta),
        }
    }
}

impl LayerNormParams<Tensor> {
    pub fn identity(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
        }
    }
}

pub const LN_EPS: Real = 1e-5;

impl LayerNormParams<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta, LN_EPS)
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for Vec<P> {
    type Mapped<U> = Vec<P::Mapped<U>>;
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U> {
        self.iter()
            .enumerate()
            .map(|(i, p)| p.map_named(&join(prefix, &i.to_string()), f))
            .collect()
    }
}

impl<T, P: ParamTree<T>> ParamTree<T> for Option<P> {
    type Mapped<U> = Option<P::Mapped<U>>;
    fn map_named<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Self::Mapped<U> {
        self.as_ref().map(|p| p.map_named(prefix, f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from_seed;

    #[test]
    fn names_follow_walk_order() {
        let mut rng = rng_from_seed(0);
        let layers = vec![Linear::randn(2, 3, 1.0, &mut rng), Linear::zeros(3, 1)];
        let names: Vec<String> = named_tensors(&layers, "mlp").into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["mlp.0.w", "mlp.0.b", "mlp.1.w", "mlp.1.b"]);
    }

    #[test]
    fn load_restores_and_reports_missing() {
        let mut rng = rng_from_seed(0);
        let a = Linear::randn(2, 2, 1.0, &mut rng);
        let b = Linear::randn(2, 2, 1.0, &mut rng);
        let src: BTreeMap<_, _> = named_tensors(&a, "x").into_iter().collect();
        assert_eq!(load(&b, "x", &src).unwrap(), a);
        assert!(load(&b, "y", &src).is_err());
    }

    #[test]
    fn hash_sees_every_bit() {
        let mut rng = rng_from_seed(0);
        let a = Linear::randn(2, 2, 1.0, &mut rng);
        let mut b = a.clone();
        assert_eq!(content_hash(&a, ""), content_hash(&b, ""));
        b.b = b.b.map(|v| v + 1e-300);
        b.b = b.b.map(|v| v + Real::EPSILON);
        assert_ne!(content_hash(&a, ""), content_hash(&b, ""));
    }
}
