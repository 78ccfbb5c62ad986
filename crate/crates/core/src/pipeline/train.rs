use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{ParamGroup, Predictions, Trainable};
use crate::error::{Error, Result};
use crate::memory::MemoryBuffer;
use crate::numerics::{tagged_rng, Real, Tape, Tensor, Var};
use crate::params::{leaves, visit, with_leaves};

use super::config::RunConfig;
use super::loss::{loss_on_tape, multi_task_loss, LossTerms};
use super::model::{run_stream, window_forward, Model, ModelParams};
use super::windows::make_windows;

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss_total: Real,
    pub loss_depth: Real,
    pub loss_pointmap: Real,
    pub loss_camera: Real,
}

impl StepLog {
    fn new(step: usize, l: LossTerms) -> Self {
        StepLog {
            step,
            loss_total: l.total,
            loss_depth: l.depth,
            loss_pointmap: l.pointmap,
            loss_camera: l.camera,
        }
    }
}

pub fn write_log(log: &[StepLog], out: &mut impl Write) -> Result<()> {
    for entry in log {
        serde_json::to_writer(&mut *out, entry)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Adam moments with weight decay applied directly to the parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub weight_decay: Real,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &[Tensor], lr: Real, weight_decay: Real) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Update every parameter that has a gradient; the rest are untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g.data()[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g.data()[j] * g.data()[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                p[j] -= self.lr * (update + self.weight_decay * p[j]);
            }
        }
    }
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: Real) -> Real {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<Real>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Frames and ground truth to fit.
#[derive(Clone, Copy, Debug)]
pub struct Dataset<'a> {
    pub images: &'a [&'a Tensor],
    pub ground_truth: &'a [Predictions],
}

/// Loss over a consecutive run of windows starting from an empty memory.
/// Returns the tape, the loss terms and the bound parameters.
fn sample_loss(
    cfg: &RunConfig,
    params: &ModelParams,
    trainable: &Trainable,
    data: Dataset<'_>,
    start: usize,
    frames: usize,
) -> Result<(Tape, super::loss::LossVars, ModelParams<Var>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, trainable);
    let mut mem = MemoryBuffer::with_ops(cfg.memory(), &mut tape)?;
    let sched = make_windows(frames, cfg.window, cfg.stride)?;
    let mut preds = Vec::with_capacity(frames);
    let mut gts = Vec::with_capacity(frames);
    for w in &sched.windows {
        let r = start + w.start..start + w.end;
        preds.extend(window_forward(&mut tape, cfg, &p, &data.images[r.clone()], &mut mem)?);
        gts.extend(data.ground_truth[r].iter());
    }
    let loss = loss_on_tape(&mut tape, &preds, &gts)?;
    Ok((tape, loss, p))
}

/// Frames spanned by `windows` consecutive windows.
fn frames_for(cfg: &RunConfig, windows: usize) -> usize {
    (windows - 1) * cfg.stride + cfg.window
}

/// Streaming loss of `params` over the whole dataset.
pub fn evaluate_loss(cfg: &RunConfig, params: &ModelParams, data: Dataset<'_>) -> Result<LossTerms> {
    let model = Model {
        cfg: cfg.clone(),
        params: params.clone(),
    };
    let out = run_stream(&model, data.images)?;
    multi_task_loss(&out.predictions, data.ground_truth)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<StepLog>,
    /// Full-sequence loss before the first step.
    pub initial_loss: LossTerms,
    /// Full-sequence loss after the last step.
    pub final_loss: LossTerms,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Memory groups only.
    WarmUp,
    /// Everything, with longer samples.
    Joint,
}

/// What one optimization stage trains, for how long, and on how many
/// consecutive windows per sample at each step.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub trainable: Trainable,
    pub lr: Real,
    pub windows_per_step: Vec<usize>,
    pub rng_tag: &'static str,
}

impl Stage {
    pub fn plan(self, cfg: &RunConfig) -> StagePlan {
        match self {
            Stage::WarmUp => StagePlan {
                trainable: Trainable::memory_only(),
                lr: cfg.lr_stage1,
                windows_per_step: vec![cfg.train_windows; cfg.stage1_steps],
                rng_tag: "train.stage1",
            },
            Stage::Joint => {
                let ladder = &cfg.stage2_ladder;
                let steps = cfg.stage2_steps;
                StagePlan {
                    trainable: Trainable::all(),
                    lr: cfg.lr_stage2,
                    windows_per_step: (0..steps).map(|i| ladder[i * ladder.len() / steps]).collect(),
                    rng_tag: "train.stage2",
                }
            }
        }
    }
}

/// Run `plan`, appending one log line per step. Groups the plan freezes
/// keep their exact bytes; this is checked before returning.
pub fn train_stage(
    cfg: &RunConfig,
    params: ModelParams,
    data: Dataset<'_>,
    plan: &StagePlan,
    log: &mut Vec<StepLog>,
) -> Result<ModelParams> {
    let trainable = plan.trainable;
    let n = data.images.len();
    if data.ground_truth.len() != n {
        return Err(Error::Config(format!("{n} frames but {} ground-truth entries", data.ground_truth.len())));
    }
    let frozen: Vec<(ParamGroup, String)> = trainable.frozen().map(|g| (g, params.group_hash(g))).collect();
    let mut values = leaves(&params);
    let mut opt = AdamW::new(&values, plan.lr, cfg.weight_decay);
    let mut rng = tagged_rng(cfg.seed, plan.rng_tag);
    let offset = log.len();
    let mut current = params;
    for (step, &windows) in plan.windows_per_step.iter().enumerate() {
        let frames = frames_for(cfg, windows).min(n);
        let start = rng.random_range(0..=n - frames);
        let (tape, loss, bound) = sample_loss(cfg, &current, &trainable, data, start, frames)?;
        let terms = loss.values(&tape);
        if !terms.total.is_finite() {
            return Err(Error::Divergence {
                step: offset + step,
                loss: terms.total as f64,
            });
        }
        log.push(StepLog::new(offset + step, terms));
        let grads = tape.backward(loss.total)?;
        let mut g = Vec::with_capacity(values.len());
        visit(&bound, "", |_, &v| {
            g.push(tape.requires_grad(v).then(|| grads.get_or_zeros(v, &tape)));
        });
        clip_global_norm(&mut g, cfg.grad_clip);
        opt.step(&mut values, &g);
        current = with_leaves(&current, &values)?;
    }
    for (g, h) in frozen {
        if current.group_hash(g) != h {
            return Err(Error::FrozenGroupChanged { group: g.name().into() });
        }
    }
    Ok(current)
}

/// Warm-up then joint fine-tuning, from the seeded initialization.
pub fn train(cfg: &RunConfig, data: Dataset<'_>) -> Result<TrainOutcome> {
    train_from(cfg, ModelParams::init(cfg), data)
}

pub fn train_from(cfg: &RunConfig, init: ModelParams, data: Dataset<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let initial_loss = evaluate_loss(cfg, &init, data)?;
    let mut log = Vec::with_capacity(cfg.stage1_steps + cfg.stage2_steps);
    let params = train_stage(cfg, init, data, &Stage::WarmUp.plan(cfg), &mut log)?;
    let params = train_stage(cfg, params, data, &Stage::Joint.plan(cfg), &mut log)?;
    let final_loss = evaluate_loss(cfg, &params, data)?;
    Ok(TrainOutcome {
        params,
        log,
        initial_loss,
        final_loss,
    })
}
