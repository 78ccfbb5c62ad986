use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::pipeline::{global_step, run_baseline, run_stream, Model, RunConfig};

use super::scene::{gen_scene, Motion, SceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "memory")]
    Memory,
    #[serde(rename = "windowed-baseline")]
    WindowedBaseline,
    #[serde(rename = "full-global-attention")]
    FullGlobalAttention,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Memory, Method::WindowedBaseline, Method::FullGlobalAttention];

    pub fn name(self) -> &'static str {
        match self {
            Method::Memory => "memory",
            Method::WindowedBaseline => "windowed-baseline",
            Method::FullGlobalAttention => "full-global-attention",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown bench method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub method: Method,
    pub frames: usize,
    /// Median wall time over the repeats.
    pub seconds: f64,
    /// State retained across windows plus the largest attention key/value
    /// working set.
    pub peak_bytes: usize,
}

pub const CSV_HEADER: &str = "method,frames,seconds,peak_bytes";

pub fn write_csv(records: &[BenchRecord], out: &mut impl Write) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{},{},{:.6},{}", r.method, r.frames, r.seconds, r.peak_bytes)?;
    }
    Ok(())
}

/// Dimensions used for timing runs.
pub fn bench_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        d_model: 32,
        blocks: 2,
        heads: 4,
        image_size: 56,
        patch: 14,
        memory_horizon: 4,
        window: 4,
        stride: 4,
        inject_layers: vec![0, 1],
        ..RunConfig::default()
    }
}

/// Key and value rows held by every block while attending over `tokens`.
fn kv_bytes(cfg: &RunConfig, tokens: usize) -> usize {
    2 * cfg.blocks * tokens * cfg.d_model * std::mem::size_of::<Real>()
}

fn run_once(model: &Model, method: Method, images: &[&Tensor]) -> Result<usize> {
    let cfg = &model.cfg;
    let per_frame = cfg.backbone().tokens_per_frame();
    let window_tokens = cfg.window * per_frame;
    Ok(match method {
        Method::Memory => {
            let out = run_stream(model, images)?;
            out.peak_retained_bytes + kv_bytes(cfg, window_tokens)
        }
        Method::WindowedBaseline => {
            run_baseline(model, images)?;
            kv_bytes(cfg, window_tokens)
        }
        Method::FullGlobalAttention => {
            global_step(model, images)?;
            kv_bytes(cfg, images.len() * per_frame)
        }
    })
}

/// Median-of-`repeats` inference timings for every method and frame count.
pub fn bench_scaling(cfg: &RunConfig, counts: &[usize], methods: &[Method], repeats: usize) -> Result<Vec<BenchRecord>> {
    if counts.is_empty() || counts.contains(&0) || repeats == 0 {
        return Err(Error::Config("bench needs positive frame counts and repeats".into()));
    }
    let model = Model::new(cfg.clone())?;
    let max = *counts.iter().max().expect("non-empty");
    let spec = SceneSpec::from_config(cfg);
    let scene = gen_scene(cfg.seed, max, Motion::Orbit, &spec)?;
    let images = scene.images();
    let mut records = Vec::with_capacity(counts.len() * methods.len());
    for &method in methods {
        for &n in counts {
            let mut times = Vec::with_capacity(repeats);
            let mut peak = 0;
            for _ in 0..repeats {
                let start = Instant::now();
                peak = peak.max(run_once(&model, method, &images[..n])?);
                times.push(start.elapsed().as_secs_f64());
            }
            times.sort_by(f64::total_cmp);
            records.push(BenchRecord {
                method,
                frames: n,
                seconds: times[times.len() / 2],
                peak_bytes: peak,
            });
        }
    }
    Ok(records)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Numerical("exponent fit needs two or more positive points".into()));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Numerical("exponent fit needs distinct frame counts".into()));
    }
    Ok(sxy / sxx)
}

/// Fitted time exponent for one method's records.
pub fn method_exponent(records: &[BenchRecord], method: Method) -> Result<f64> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.method == method)
        .map(|r| (r.frames as f64, r.seconds))
        .collect();
    fit_exponent(&pts)
}
