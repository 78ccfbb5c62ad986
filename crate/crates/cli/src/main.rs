use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use swm_core::harness::checks::{composed_suite, primitive_suite, scan_suite, CheckResult};
use swm_core::harness::{
    ablation_config, bench_config, bench_scaling, gen_scene, method_exponent, run_ablation, write_csv, Arm, Method, Motion, SceneSpec,
};
use swm_core::numerics::io::save_param_set;
use swm_core::pipeline::{
    evaluate_drift, load_checkpoint, save_checkpoint, train, write_log, Dataset, RunConfig,
};

#[derive(Parser)]
#[command(name = "swm", version, about = "Streaming reconstruction with a sliding-window state-space memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Flat TOML run config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "SWM_OUT_DIR", default_value = "swm-out")]
    out: PathBuf,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene and its ground truth.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Frame count; defaults to `train_frames`.
        #[arg(long)]
        frames: Option<usize>,
        /// orbit, corridor or loop; defaults to the config's profile.
        #[arg(long)]
        motion: Option<Motion>,
    },
    /// Two-stage training on the config's synthetic scene.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Drift metrics of a checkpoint on a long sequence.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; defaults to `<out>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 160)]
        frames: usize,
    },
    /// Inference time and retained bytes against frame count. Uses the
    /// benchmark dimensions unless `--config` is given.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "50,100,200,400")]
        frames: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "memory,windowed-baseline,full-global-attention")]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Train and score every ablation arm over several seeds. Uses the
    /// ablation dimensions unless `--config` is given.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of seeds, starting at the config seed.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Held-out sequence length; defaults to `train_frames`, which
        /// replays the training trajectory with fresh noise.
        #[arg(long)]
        eval_frames: Option<usize>,
    },
    /// Finite-difference gradient suites.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        primitive_seeds: u64,
        #[arg(long, default_value_t = 20)]
        composed_seeds: u64,
    },
    /// Chunked against sequential scan equivalence.
    Scancheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        instances: usize,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn report_checks(results: &[CheckResult], path: &Path) -> Result<bool> {
    for r in results {
        println!(
            "{:4} {:9} {:26} max error {:.3e} (tol {:.0e}, {} cases)",
            if r.passed { "ok" } else { "FAIL" },
            r.module,
            r.name,
            r.max_error,
            r.tolerance,
            r.cases
        );
    }
    write_json(path, &results)?;
    Ok(results.iter().all(|r| r.passed))
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Gen { common, frames, motion } => {
            let cfg = common.run_config()?;
            let n = frames.unwrap_or(cfg.train_frames);
            let motion = motion.unwrap_or(cfg.motion);
            let scene = gen_scene(cfg.seed, n, motion, &SceneSpec::from_config(&cfg))?;
            let mut tensors = vec![("points".to_string(), scene.points.clone()), ("features".to_string(), scene.features.clone())];
            for (i, (f, g)) in scene.frames.iter().zip(&scene.ground_truth).enumerate() {
                tensors.push((format!("frame.{i}.image"), f.image.clone()));
                tensors.push((format!("frame.{i}.depth"), g.depth.clone()));
                tensors.push((format!("frame.{i}.pointmap"), g.pointmap.clone()));
            }
            let poses: Vec<_> = scene
                .poses()
                .iter()
                .map(|p| json!({"rotation": p.rotation, "translation": p.translation}))
                .collect();
            let meta = json!({"seed": cfg.seed, "motion": motion, "frames": n, "digest": scene.digest(), "poses": poses});
            let out = common.out_dir()?;
            save_param_set(&out.join("scene.swmt"), &out.join("scene.json"), &tensors, meta)?;
            println!("{} frames, digest {}", n, scene.digest());
            Ok(true)
        }
        Command::Train { common } => {
            let cfg = common.run_config()?;
            let scene = gen_scene(cfg.seed, cfg.train_frames, cfg.motion, &SceneSpec::from_config(&cfg))?;
            let images = scene.images();
            let outcome = train(
                &cfg,
                Dataset {
                    images: &images,
                    ground_truth: &scene.ground_truth,
                },
            )?;
            let out = common.out_dir()?;
            let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
            write_log(&outcome.log, &mut log)?;
            log.flush()?;
            save_checkpoint(&out.join("checkpoint"), &cfg, &outcome.params)?;
            write_json(
                &out.join("train_summary.json"),
                &json!({"initial_loss": outcome.initial_loss, "final_loss": outcome.final_loss, "steps": outcome.log.len()}),
            )?;
            println!(
                "{} steps, full-sequence loss {:.4} -> {:.4}",
                outcome.log.len(),
                outcome.initial_loss.total,
                outcome.final_loss.total
            );
            Ok(true)
        }
        Command::Eval {
            common,
            checkpoint,
            frames,
        } => {
            let out = common.out_dir()?.to_path_buf();
            let dir = checkpoint.unwrap_or_else(|| out.join("checkpoint"));
            let mut model = load_checkpoint(&dir).with_context(|| format!("loading {}", dir.display()))?;
            if let Some(s) = common.seed {
                model.cfg.seed = s;
            }
            let scene = gen_scene(model.cfg.seed, frames, model.cfg.motion, &SceneSpec::from_config(&model.cfg))?;
            let report = evaluate_drift(&model, &scene.images(), &scene.ground_truth)?;
            write_json(&out.join("drift.json"), &report)?;
            println!(
                "endpoint drift {:.4} m, pointmap mse {:.4}, accuracy {:.4}, completeness {:.4}",
                report.endpoint_drift, report.pointmap_mse, report.accuracy, report.completeness
            );
            Ok(true)
        }
        Command::Bench {
            common,
            frames,
            methods,
            repeats,
        } => {
            let cfg = match &common.config {
                Some(_) => common.run_config()?,
                None => bench_config(common.seed.unwrap_or(0)),
            };
            let records = bench_scaling(&cfg, &frames, &methods, repeats)?;
            let out = common.out_dir()?;
            let mut f = BufWriter::new(File::create(out.join("bench.csv"))?);
            write_csv(&records, &mut f)?;
            f.flush()?;
            for &m in &methods {
                if let Ok(e) = method_exponent(&records, m) {
                    println!("{m}: time exponent {e:.3}");
                }
            }
            Ok(true)
        }
        Command::Ablate {
            common,
            seeds,
            eval_frames,
        } => {
            let cfg = match &common.config {
                Some(_) => common.run_config()?,
                None => ablation_config(common.seed.unwrap_or(0)),
            };
            let seed_list: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
            let table = run_ablation(&cfg, &Arm::ALL, &seed_list, eval_frames.unwrap_or(cfg.train_frames))?;
            write_json(&common.out_dir()?.join("ablation.json"), &table)?;
            for a in &table.arms {
                println!(
                    "{:18} endpoint drift {:.4}  pointmap mse {:.4}  step-0 deviation {:.2e}",
                    a.arm.name(),
                    a.mean_endpoint_drift,
                    a.mean_pointmap_mse,
                    a.step0_identity_deviation
                );
            }
            Ok(true)
        }
        Command::Gradcheck {
            common,
            primitive_seeds,
            composed_seeds,
        } => {
            let mut results = primitive_suite(primitive_seeds)?;
            results.extend(composed_suite(composed_seeds)?);
            report_checks(&results, &common.out_dir()?.join("gradcheck.json"))
        }
        Command::Scancheck { common, instances } => {
            let results = scan_suite(instances, common.seed.unwrap_or(0))?;
            report_checks(&results, &common.out_dir()?.join("scancheck.json"))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
