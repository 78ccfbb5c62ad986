use std::collections::BTreeMap;

use crate::backbone::{
    aggregate, embed_window, BackboneParams, HeadParams, KvHook, ParamGroup, PredVars, Predictions, Trainable,
};
use crate::error::{ensure_shape, Result};
use crate::injector::{InjectionMode, InjectorParams};
use crate::memory::{MemoryBuffer, Stream};
use crate::numerics::{tagged_rng, Real, Tape, Tensor, Var};
use crate::params::{bind, content_hash, join, ParamTree};
use crate::ssm::MambaBlockParams;

use super::config::RunConfig;
use super::windows::make_windows;

/// Temporal blocks for the two memory streams.
#[derive(Clone, Debug, PartialEq)]
pub struct SwmParams<T = Tensor> {
    pub k: MambaBlockParams<T>,
    /// `None` when both streams share `k`.
    pub v: Option<MambaBlockParams<T>>,
}

impl<T> ParamTree<T> for SwmParams<T> {
    type Mapped<U> = SwmParams<U>;
    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> SwmParams<U> {
        SwmParams {
            k: self.k.map_named(&join(p, "K"), f),
            v: self.v.map_named(&join(p, "V"), f),
        }
    }
}

impl<T> SwmParams<T> {
    pub fn block(&self, stream: Stream) -> &MambaBlockParams<T> {
        match stream {
            Stream::K => &self.k,
            Stream::V => self.v.as_ref().unwrap_or(&self.k),
        }
    }
}

/// All parameters, one field per group.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub backbone: BackboneParams<T>,
    pub heads: HeadParams<T>,
    pub swm: SwmParams<T>,
    pub injector: InjectorParams<T>,
}

impl<T> ParamTree<T> for ModelParams<T> {
    type Mapped<U> = ModelParams<U>;
    fn map_named<U>(&self, p: &str, f: &mut dyn FnMut(&str, &T) -> U) -> ModelParams<U> {
        ModelParams {
            backbone: self.backbone.map_named(&join(p, "backbone"), f),
            heads: self.heads.map_named(&join(p, "heads"), f),
            swm: self.swm.map_named(&join(p, "swm"), f),
            injector: self.injector.map_named(&join(p, "injector"), f),
        }
    }
}

impl ModelParams<Tensor> {
    /// Every group draws from its own seeded stream, so changing one
    /// group's init never changes another's bytes.
    pub fn init(cfg: &RunConfig) -> Self {
        let bb = cfg.backbone();
        let mc = cfg.mamba();
        let mut rng_bb = tagged_rng(cfg.seed, "backbone");
        let mut rng_heads = tagged_rng(cfg.seed, "heads");
        let mut rng_k = tagged_rng(cfg.seed, "swm.K");
        let mut rng_v = tagged_rng(cfg.seed, "swm.V");
        let mut rng_inj = tagged_rng(cfg.seed, "injector");
        let mut rng_inj_out = tagged_rng(cfg.seed, "injector.out");
        ModelParams {
            backbone: BackboneParams::init(&bb, &mut rng_bb),
            heads: HeadParams::init(cfg.d_model, &mut rng_heads),
            swm: SwmParams {
                k: MambaBlockParams::init(&mc, &mut rng_k),
                v: (!cfg.share_kv_mamba).then(|| MambaBlockParams::init(&mc, &mut rng_v)),
            },
            injector: InjectorParams::init(
                &cfg.inject_layers,
                cfg.d_model,
                cfg.injector_mid(),
                cfg.output_init,
                &mut rng_inj,
                &mut rng_inj_out,
            ),
        }
    }

    pub fn group_hash(&self, g: ParamGroup) -> String {
        match g {
            ParamGroup::Backbone => content_hash(&self.backbone, g.name()),
            ParamGroup::Heads => content_hash(&self.heads, g.name()),
            ParamGroup::Swm => content_hash(&self.swm, g.name()),
            ParamGroup::Injector => content_hash(&self.injector, g.name()),
        }
    }

    pub fn group_hashes(&self) -> BTreeMap<String, String> {
        ParamGroup::ALL
            .into_iter()
            .map(|g| (g.name().to_string(), self.group_hash(g)))
            .collect()
    }

    /// Put the parameters on `tape`; frozen groups become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &Trainable) -> ModelParams<Var> {
        bind(self, "", tape, |n| trainable.param(n))
    }
}

/// Feeds refined memory tokens into the designated blocks.
struct MemoryHook<'a> {
    injector: &'a InjectorParams<Var>,
    mode: InjectionMode,
    /// Aligned with the window's token rows.
    k_hat: Var,
    v_hat: Var,
    /// Refined history rows for append mode.
    history: Option<(Var, Var)>,
}

impl KvHook for MemoryHook<'_> {
    fn adjust(&mut self, tape: &mut Tape, layer: usize, k: Var, v: Var) -> Result<(Var, Var)> {
        let Some(l) = self.injector.layer(layer) else {
            return Ok((k, v));
        };
        let (k2, v2) = l.inject(tape, k, v, self.k_hat, self.v_hat)?;
        match (self.mode, self.history) {
            (InjectionMode::AppendHistory, Some((hk, hv))) => {
                let ek = l.k.apply(tape, hk)?;
                let ev = l.v.apply(tape, hv)?;
                Ok((tape.concat_rows(&[k2, ek])?, tape.concat_rows(&[v2, ev])?))
            }
            _ => Ok((k2, v2)),
        }
    }
}

/// Mean over the frames of a window, per patch: `[L·N, D] → [N, D]`.
fn distill(tape: &mut Tape, features: Var, frames: usize) -> Result<Var> {
    let rows = tape.shape(features)[0];
    let n = rows / frames;
    let mut acc = tape.slice_rows(features, 0, n)?;
    for f in 1..frames {
        let s = tape.slice_rows(features, f * n, n)?;
        acc = tape.add(acc, s)?;
    }
    Ok(tape.scale(acc, 1.0 / frames as Real))
}

/// Injector-free windowed backbone.
pub fn baseline_window(
    tape: &mut Tape,
    cfg: &RunConfig,
    p: &ModelParams<Var>,
    images: &[&Tensor],
) -> Result<Vec<PredVars>> {
    let bb = cfg.backbone();
    let x = embed_window(tape, &bb, &p.backbone, images)?;
    let agg = aggregate(tape, &bb, &p.backbone, x, None)?;
    p.heads.predict(tape, agg.tokens, images.len())
}

/// One extract, read-out, encode, inject, predict, update, propagate cycle
/// on a tape.
pub fn window_forward(
    tape: &mut Tape,
    cfg: &RunConfig,
    p: &ModelParams<Var>,
    images: &[&Tensor],
    mem: &mut MemoryBuffer<Var>,
) -> Result<Vec<PredVars>> {
    let bb = cfg.backbone();
    let frames = images.len();
    if !cfg.memory_enabled {
        mem.reset_with(tape);
    }
    let x = embed_window(tape, &bb, &p.backbone, images)?;

    // features of the bare backbone
    let probe = aggregate(tape, &bb, &p.backbone, x, None)?;
    let current = if cfg.per_frame_entries {
        probe.features
    } else {
        distill(tape, probe.features, frames)?
    };
    let cur_rows = tape.shape(current)[0];

    let mut refined = Vec::with_capacity(2);
    let mut states = Vec::with_capacity(2);
    let mut history = Vec::with_capacity(2);
    for stream in [Stream::K, Stream::V] {
        let readout = mem.read_out_with(tape, stream, &current)?;
        let h0 = *mem.state(stream);
        let (f_hat, h) = p.swm.block(stream).forward(tape, readout, h0)?;
        let rows = tape.shape(f_hat)[0];
        refined.push(tape.slice_rows(f_hat, rows - cur_rows, cur_rows)?);
        history.push((rows > cur_rows).then(|| tape.slice_rows(f_hat, 0, rows - cur_rows)).transpose()?);
        states.push(h);
    }
    let align = |tape: &mut Tape, v: Var| -> Result<Var> {
        if cfg.per_frame_entries {
            Ok(v)
        } else {
            tape.tile_rows(v, frames)
        }
    };
    let k_hat = align(tape, refined[0])?;
    let v_hat = align(tape, refined[1])?;
    let mut hook = MemoryHook {
        injector: &p.injector,
        mode: cfg.injection_mode,
        k_hat,
        v_hat,
        history: history[0].zip(history[1]),
    };
    let agg = aggregate(tape, &bb, &p.backbone, x, Some(&mut hook))?;
    let preds = p.heads.predict(tape, agg.tokens, frames)?;

    if cfg.per_frame_entries {
        let n = cur_rows / frames;
        for f in 0..frames {
            let k = tape.slice_rows(refined[0], f * n, n)?;
            let v = tape.slice_rows(refined[1], f * n, n)?;
            let raw = tape.slice_rows(current, f * n, n)?;
            mem.update_with(tape, &k, &v, &raw)?;
        }
    } else {
        mem.update_with(tape, &refined[0], &refined[1], &current)?;
    }
    mem.propagate_with(&*tape, states[0], states[1])?;
    Ok(preds)
}

/// A model ready for inference.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg);
        Ok(Model { cfg, params })
    }

    pub fn empty_memory(&self) -> Result<MemoryBuffer> {
        MemoryBuffer::new(self.cfg.memory())
    }
}

/// Run one window through the full cycle, advancing `buf`.
pub fn step_window(model: &Model, images: &[&Tensor], buf: &mut MemoryBuffer) -> Result<Vec<Predictions>> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, &Trainable::none());
    let mut vbuf = buf.map(|t| tape.constant(t.clone()));
    let preds = window_forward(&mut tape, &model.cfg, &p, images, &mut vbuf)?;
    *buf = vbuf.map(|&v| tape.value(v).clone());
    let grid = model.cfg.backbone().grid();
    preds.iter().map(|pv| pv.to_predictions(&tape, grid)).collect()
}

/// Injector-free predictions for one window.
pub fn baseline_step(model: &Model, images: &[&Tensor]) -> Result<Vec<Predictions>> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, &Trainable::none());
    let preds = baseline_window(&mut tape, &model.cfg, &p, images)?;
    let grid = model.cfg.backbone().grid();
    preds.iter().map(|pv| pv.to_predictions(&tape, grid)).collect()
}

/// Every frame attends to every other frame in one pass.
pub fn global_step(model: &Model, images: &[&Tensor]) -> Result<Vec<Predictions>> {
    baseline_step(model, images)
}

/// Per-frame predictions for a whole sequence.
#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub predictions: Vec<Predictions>,
    /// Largest buffer-plus-state footprint seen, in bytes.
    pub peak_retained_bytes: usize,
    pub memory: MemoryBuffer,
}

/// Stream every window in order; where windows overlap the later window's
/// prediction wins.
pub fn run_stream(model: &Model, images: &[&Tensor]) -> Result<StreamOutput> {
    run_windows(model, images, step_window)
}

/// The windowed baseline over a whole sequence.
pub fn run_baseline(model: &Model, images: &[&Tensor]) -> Result<StreamOutput> {
    run_windows(model, images, |m, w, _| baseline_step(m, w))
}

fn run_windows(
    model: &Model,
    images: &[&Tensor],
    mut step: impl FnMut(&Model, &[&Tensor], &mut MemoryBuffer) -> Result<Vec<Predictions>>,
) -> Result<StreamOutput> {
    ensure_shape!(!images.is_empty(), "empty sequence");
    let sched = make_windows(images.len(), model.cfg.window, model.cfg.stride)?;
    let mut buf = model.empty_memory()?;
    let mut slots: Vec<Option<Predictions>> = vec![None; images.len()];
    let mut peak = buf.retained_bytes();
    for w in &sched.windows {
        let preds = step(model, &images[w.clone()], &mut buf)?;
        for (i, p) in w.clone().zip(preds) {
            slots[i] = Some(p);
        }
        peak = peak.max(buf.retained_bytes());
    }
    Ok(StreamOutput {
        predictions: slots.into_iter().map(|p| p.expect("schedule covers every frame")).collect(),
        peak_retained_bytes: peak,
        memory: buf,
    })
}
