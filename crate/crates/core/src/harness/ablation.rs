use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::ParamGroup;
use crate::error::{Error, Result};
use crate::injector::OutputInit;
use crate::numerics::Real;
use crate::pipeline::{
    evaluate_drift, run_baseline, run_stream, train, Dataset, DriftReport, Model, ModelParams, RunConfig,
};

use super::scene::{gen_scene, SceneSpec, SyntheticScene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "full")]
    Full,
    /// Gain α = 0: the buffer stores raw features.
    #[serde(rename = "w/o-mamba-update")]
    NoMambaUpdate,
    /// Every window starts from an empty buffer.
    #[serde(rename = "w/o-memory")]
    NoMemory,
    /// Injector output layers start random.
    #[serde(rename = "w/o-zero-init")]
    NoZeroInit,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Full, Arm::NoMambaUpdate, Arm::NoMemory, Arm::NoZeroInit];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoMambaUpdate => "w/o-mamba-update",
            Arm::NoMemory => "w/o-memory",
            Arm::NoZeroInit => "w/o-zero-init",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Arm::Full => {}
            Arm::NoMambaUpdate => cfg.alpha = 0.0,
            Arm::NoMemory => cfg.memory_enabled = false,
            Arm::NoZeroInit => cfg.output_init = OutputInit::Random,
        }
        cfg
    }

    /// Parameter groups whose initial bytes this arm changes.
    pub fn ablated_groups(self) -> &'static [ParamGroup] {
        match self {
            Arm::NoZeroInit => &[ParamGroup::Injector],
            _ => &[],
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub endpoint_drift: Real,
    pub pointmap_mse: Real,
    pub accuracy: Real,
    pub completeness: Real,
    pub final_train_loss: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub mean_endpoint_drift: Real,
    pub mean_pointmap_mse: Real,
    /// Largest deviation from the injector-free backbone before training.
    pub step0_identity_deviation: Real,
    pub seeds: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub version: u32,
    pub train_frames: usize,
    pub eval_frames: usize,
    pub arms: Vec<ArmResult>,
}

impl AblationTable {
    pub fn arm(&self, arm: Arm) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

/// Model size and budget for the ablation study: small enough that ten
/// seeds of four arms train in minutes on one core.
pub fn ablation_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        d_model: 32,
        blocks: 2,
        inject_layers: vec![0, 1],
        stage1_steps: 400,
        lr_stage1: 2e-3,
        stage2_steps: 300,
        lr_stage2: 5e-4,
        stage2_ladder: vec![8, 16],
        train_frames: 160,
        noise: 0.5,
        ..RunConfig::default()
    }
}

/// Training and held-out sequences of one seeded scene. The held-out run
/// draws fresh pixel noise; with `eval_frames == train_frames` it follows
/// the training trajectory.
pub fn ablation_scenes(cfg: &RunConfig, eval_frames: usize) -> Result<(SyntheticScene, SyntheticScene)> {
    let spec = SceneSpec::from_config(cfg);
    let held_out = SceneSpec { noise_stream: 1, ..spec };
    Ok((
        gen_scene(cfg.seed, cfg.train_frames, cfg.motion, &spec)?,
        gen_scene(cfg.seed, eval_frames, cfg.motion, &held_out)?,
    ))
}

/// Largest absolute difference between the streamed pipeline and the
/// injector-free backbone on `scene`.
pub fn identity_deviation(model: &Model, scene: &SyntheticScene) -> Result<Real> {
    let images = scene.images();
    let a = run_stream(model, &images)?;
    let b = run_baseline(model, &images)?;
    let mut dev: Real = 0.0;
    for (x, y) in a.predictions.iter().zip(&b.predictions) {
        dev = dev.max(x.pointmap.max_abs_diff(&y.pointmap)).max(x.depth.max_abs_diff(&y.depth));
        for (p, q) in x.pose.rotation.iter().chain(&x.pose.translation).zip(y.pose.rotation.iter().chain(&y.pose.translation)) {
            dev = dev.max((p - q).abs());
        }
    }
    Ok(dev)
}

/// Non-ablated groups must start from the same bytes in every arm.
fn check_shared_init(inits: &[(Arm, ModelParams)]) -> Result<()> {
    let Some((_, reference)) = inits.iter().find(|(a, _)| *a == Arm::Full) else {
        return Ok(());
    };
    for (arm, p) in inits {
        for g in ParamGroup::ALL {
            if !arm.ablated_groups().contains(&g) && p.group_hash(g) != reference.group_hash(g) {
                return Err(Error::Config(format!("arm {arm} starts group {g} from different bytes")));
            }
        }
    }
    Ok(())
}

/// Train and score every arm on every seed with the same budget.
pub fn run_ablation(base: &RunConfig, arms: &[Arm], seeds: &[u64], eval_frames: usize) -> Result<AblationTable> {
    let mut results: Vec<ArmResult> = arms
        .iter()
        .map(|&arm| ArmResult {
            arm,
            mean_endpoint_drift: 0.0,
            mean_pointmap_mse: 0.0,
            step0_identity_deviation: 0.0,
            seeds: Vec::with_capacity(seeds.len()),
        })
        .collect();
    for &seed in seeds {
        let seeded = RunConfig { seed, ..base.clone() };
        let (train_scene, eval_scene) = ablation_scenes(&seeded, eval_frames)?;
        let images = train_scene.images();
        let eval_images = eval_scene.images();
        let data = Dataset {
            images: &images,
            ground_truth: &train_scene.ground_truth,
        };
        let inits: Vec<(Arm, ModelParams)> = arms
            .iter()
            .map(|&arm| (arm, ModelParams::init(&arm.apply(&seeded))))
            .collect();
        check_shared_init(&inits)?;
        for ((arm, init), res) in inits.into_iter().zip(&mut results) {
            let cfg = arm.apply(&seeded);
            let start = Model { cfg: cfg.clone(), params: init };
            res.step0_identity_deviation = res.step0_identity_deviation.max(identity_deviation(&start, &train_scene)?);
            let out = train(&cfg, data)?;
            let model = Model { cfg, params: out.params };
            let rep: DriftReport = evaluate_drift(&model, &eval_images, &eval_scene.ground_truth)?;
            res.seeds.push(SeedResult {
                seed,
                endpoint_drift: rep.endpoint_drift,
                pointmap_mse: rep.pointmap_mse,
                accuracy: rep.accuracy,
                completeness: rep.completeness,
                final_train_loss: out.final_loss.total,
            });
        }
    }
    for r in &mut results {
        let n = r.seeds.len().max(1) as Real;
        r.mean_endpoint_drift = r.seeds.iter().map(|s| s.endpoint_drift).sum::<Real>() / n;
        r.mean_pointmap_mse = r.seeds.iter().map(|s| s.pointmap_mse).sum::<Real>() / n;
    }
    Ok(AblationTable {
        version: 1,
        train_frames: base.train_frames,
        eval_frames,
        arms: results,
    })
}
