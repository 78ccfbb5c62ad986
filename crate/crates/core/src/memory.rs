//! Dual-stream FIFO memory with carried SSM states.
//!
//! The buffer is generic over its entry type: plain [`Tensor`]s for
//! streaming inference, tape [`Var`]s when a training step differentiates
//! through several windows. Operations that must build new entries take an
//! [`EntryOps`] context.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::numerics::io::{load_param_set, save_param_set};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::ssm::SsmState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    K,
    V,
}

/// Builds and inspects buffer entries.
pub trait EntryOps<E> {
    fn shape<'a>(&'a self, e: &'a E) -> &'a [usize];
    fn concat_rows(&mut self, parts: &[E]) -> Result<E>;
    /// `alpha·refined + (1 − alpha)·raw`
    fn blend(&mut self, alpha: Real, refined: &E, raw: &E) -> Result<E>;
    fn zeros(&mut self, shape: &[usize]) -> E;
}

/// [`EntryOps`] for plain tensors.
#[derive(Clone, Copy, Debug, Default)]
pub struct Plain;

impl EntryOps<Tensor> for Plain {
    fn shape<'a>(&'a self, e: &'a Tensor) -> &'a [usize] {
        e.shape()
    }

    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    fn blend(&mut self, alpha: Real, refined: &Tensor, raw: &Tensor) -> Result<Tensor> {
        refined.zip_map(raw, |a, b| alpha * a + (1.0 - alpha) * b)
    }

    fn zeros(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }
}

impl EntryOps<Var> for Tape {
    fn shape<'a>(&'a self, e: &'a Var) -> &'a [usize] {
        Tape::shape(self, *e)
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        Tape::concat_rows(self, parts)
    }

    fn blend(&mut self, alpha: Real, refined: &Var, raw: &Var) -> Result<Var> {
        let a = self.scale(*refined, alpha);
        let b = self.scale(*raw, 1.0 - alpha);
        self.add(a, b)
    }

    fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }
}

/// The end points of the gain store one input unchanged.
fn mix<E: Clone>(ops: &mut impl EntryOps<E>, alpha: Real, refined: &E, raw: &E) -> Result<E> {
    if alpha == 1.0 {
        Ok(refined.clone())
    } else if alpha == 0.0 {
        Ok(raw.clone())
    } else {
        ops.blend(alpha, refined, raw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    /// Temporal horizon `T`.
    pub capacity: usize,
    /// Update gain `α ∈ [0, 1]`.
    pub alpha: Real,
    /// Feature width of the K stream.
    pub d_k: usize,
    /// Feature width of the V stream.
    pub d_v: usize,
    /// SSM state shape `(D_inner, N_state)`.
    pub state: (usize, usize),
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::Config("memory capacity must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.d_k == 0 || self.d_v == 0 || self.state.0 == 0 || self.state.1 == 0 {
            return Err(Error::Config("memory dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MemoryBuffer<E = Tensor> {
    cfg: MemoryConfig,
    k: VecDeque<E>,
    v: VecDeque<E>,
    state_k: E,
    state_v: E,
}

impl<E: Clone> MemoryBuffer<E> {
    pub fn with_ops(cfg: MemoryConfig, ops: &mut impl EntryOps<E>) -> Result<Self> {
        cfg.validate()?;
        let s = [cfg.state.0, cfg.state.1];
        Ok(MemoryBuffer {
            cfg,
            k: VecDeque::with_capacity(cfg.capacity + 1),
            v: VecDeque::with_capacity(cfg.capacity + 1),
            state_k: ops.zeros(&s),
            state_v: ops.zeros(&s),
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.cfg
    }

    pub fn capacity(&self) -> usize {
        self.cfg.capacity
    }

    pub fn alpha(&self) -> Real {
        self.cfg.alpha
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.k.len() == self.cfg.capacity
    }

    /// Entries of one stream, oldest first.
    pub fn entries(&self, stream: Stream) -> impl ExactSizeIterator<Item = &E> {
        match stream {
            Stream::K => self.k.iter(),
            Stream::V => self.v.iter(),
        }
    }

    pub fn state(&self, stream: Stream) -> &E {
        match stream {
            Stream::K => &self.state_k,
            Stream::V => &self.state_v,
        }
    }

    fn width(&self, stream: Stream) -> usize {
        match stream {
            Stream::K => self.cfg.d_k,
            Stream::V => self.cfg.d_v,
        }
    }

    fn check_feature(&self, ops: &impl EntryOps<E>, stream: Stream, f: &E) -> Result<()> {
        let s = ops.shape(f);
        let w = self.width(stream);
        ensure_shape!(
            s.len() == 2 && s[1] == w,
            "{stream:?}-stream feature {s:?} does not have width {w}"
        );
        Ok(())
    }

    /// History entries that take part in the next read-out: all of them,
    /// except the oldest once the buffer is full.
    pub fn readable(&self, stream: Stream) -> impl Iterator<Item = &E> {
        let skip = usize::from(self.is_full());
        self.entries(stream).skip(skip)
    }

    /// Concatenate the readable history with the current feature along the
    /// token axis.
    pub fn read_out_with(&self, ops: &mut impl EntryOps<E>, stream: Stream, current: &E) -> Result<E> {
        self.check_feature(ops, stream, current)?;
        let mut parts: Vec<E> = self.readable(stream).cloned().collect();
        if parts.is_empty() {
            return Ok(current.clone());
        }
        parts.push(current.clone());
        ops.concat_rows(&parts)
    }

    /// Push the blended entries for both streams, evicting the oldest pair
    /// when over capacity.
    pub fn update_with(&mut self, ops: &mut impl EntryOps<E>, k_hat: &E, v_hat: &E, raw: &E) -> Result<()> {
        self.check_feature(ops, Stream::K, k_hat)?;
        self.check_feature(ops, Stream::V, v_hat)?;
        let (sk, sv, sr) = (ops.shape(k_hat), ops.shape(v_hat), ops.shape(raw));
        ensure_shape!(sk == sr, "refined K entry {sk:?} vs raw feature {sr:?}");
        ensure_shape!(sv == sr, "refined V entry {sv:?} vs raw feature {sr:?}");
        let k = mix(ops, self.cfg.alpha, k_hat, raw)?;
        let v = mix(ops, self.cfg.alpha, v_hat, raw)?;
        self.k.push_back(k);
        self.v.push_back(v);
        if self.k.len() > self.cfg.capacity {
            self.k.pop_front();
            self.v.pop_front();
        }
        Ok(())
    }

    /// Replace the carried SSM states.
    pub fn propagate_with(&mut self, ops: &impl EntryOps<E>, new_k: E, new_v: E) -> Result<()> {
        let want = [self.cfg.state.0, self.cfg.state.1];
        for (name, s) in [("K", ops.shape(&new_k)), ("V", ops.shape(&new_v))] {
            if s != want {
                return Err(Error::State(format!("{name} state {s:?}, expected {want:?}")));
            }
        }
        self.state_k = new_k;
        self.state_v = new_v;
        Ok(())
    }

    /// Empty both streams and zero the states; capacity and gain are kept.
    pub fn reset_with(&mut self, ops: &mut impl EntryOps<E>) {
        self.k.clear();
        self.v.clear();
        let s = [self.cfg.state.0, self.cfg.state.1];
        self.state_k = ops.zeros(&s);
        self.state_v = ops.zeros(&s);
    }

    /// Same buffer with every entry and state converted by `f`.
    pub fn map<F>(&self, mut f: impl FnMut(&E) -> F) -> MemoryBuffer<F> {
        MemoryBuffer {
            cfg: self.cfg,
            k: self.k.iter().map(&mut f).collect(),
            v: self.v.iter().map(&mut f).collect(),
            state_k: f(&self.state_k),
            state_v: f(&self.state_v),
        }
    }

    /// Bytes held by buffered entries and states.
    pub fn retained_bytes_with(&self, ops: &impl EntryOps<E>) -> usize {
        let bytes = |e: &E| ops.shape(e).iter().product::<usize>() * std::mem::size_of::<Real>();
        self.k.iter().chain(&self.v).map(bytes).sum::<usize>() + bytes(&self.state_k) + bytes(&self.state_v)
    }
}

impl MemoryBuffer<Tensor> {
    pub fn new(cfg: MemoryConfig) -> Result<Self> {
        Self::with_ops(cfg, &mut Plain)
    }

    pub fn read_out(&self, stream: Stream, current: &Tensor) -> Result<Tensor> {
        self.read_out_with(&mut Plain, stream, current)
    }

    pub fn update(&mut self, k_hat: &Tensor, v_hat: &Tensor, raw: &Tensor) -> Result<()> {
        self.update_with(&mut Plain, k_hat, v_hat, raw)
    }

    pub fn propagate(&mut self, new_k: SsmState, new_v: SsmState) -> Result<()> {
        self.propagate_with(&Plain, new_k.h, new_v.h)
    }

    pub fn reset(&mut self) {
        self.reset_with(&mut Plain)
    }

    pub fn ssm_state(&self, stream: Stream) -> SsmState {
        SsmState {
            h: self.state(stream).clone(),
        }
    }

    pub fn retained_bytes(&self) -> usize {
        self.retained_bytes_with(&Plain)
    }

    /// Write the buffer to a tensor container plus JSON manifest.
    pub fn save_snapshot(&self, bin: &Path, json: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (i, (k, v)) in self.k.iter().zip(&self.v).enumerate() {
            tensors.push((format!("k.{i}"), k.clone()));
            tensors.push((format!("v.{i}"), v.clone()));
        }
        tensors.push(("state_k".into(), self.state_k.clone()));
        tensors.push(("state_v".into(), self.state_v.clone()));
        let meta = serde_json::json!({ "memory": self.cfg, "len": self.len() });
        save_param_set(bin, json, &tensors, meta)
    }

    pub fn load_snapshot(bin: &Path, json: &Path) -> Result<Self> {
        let (tensors, meta) = load_param_set(bin, json)?;
        let cfg: MemoryConfig = serde_json::from_value(meta["memory"].clone())?;
        let len = meta["len"]
            .as_u64()
            .ok_or_else(|| Error::Format("snapshot lacks `len`".into()))? as usize;
        let mut buf = MemoryBuffer::new(cfg)?;
        let mut map: std::collections::BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Format(format!("snapshot lacks `{name}`")))
        };
        for i in 0..len {
            let k = take(&format!("k.{i}"))?;
            let v = take(&format!("v.{i}"))?;
            buf.check_feature(&Plain, Stream::K, &k)?;
            buf.check_feature(&Plain, Stream::V, &v)?;
            buf.k.push_back(k);
            buf.v.push_back(v);
        }
        if buf.k.len() > cfg.capacity {
            return Err(Error::Format(format!("snapshot holds {len} entries, capacity {}", cfg.capacity)));
        }
        let sk = take("state_k")?;
        let sv = take("state_v")?;
        buf.propagate_with(&Plain, sk, sv)?;
        Ok(buf)
    }
}
