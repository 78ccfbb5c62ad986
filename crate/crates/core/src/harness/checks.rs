//! Self-check suites run by `swm gradcheck` and `swm scancheck`.

use rand::Rng as _;
use serde::Serialize;

use crate::backbone::{HeadParams, Pose, Predictions};
use crate::error::Result;
use crate::injector::{InjectorParams, OutputInit};
use crate::numerics::{check_gradient, rng_from_seed, Real, Rng, Tape, Tensor, Var};
use crate::params::{leaves, with_leaves};
use crate::pipeline::loss_on_tape;
use crate::ssm::{scan_chunked, scan_on_tape, scan_sequential, MambaBlockParams, MambaConfig, Residual, ScanInputs, SsmState};

pub const PRIMITIVE_TOL: Real = 1e-6;
pub const COMPOSED_TOL: Real = 1e-4;
pub const SCAN_TOL: Real = 1e-10;
const EPS: Real = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub cases: usize,
    pub max_error: Real,
    pub tolerance: Real,
    pub passed: bool,
}

impl CheckResult {
    fn new(module: &'static str, name: &'static str, cases: usize, max_error: Real, tolerance: Real) -> Self {
        CheckResult {
            module,
            name,
            cases,
            max_error,
            tolerance,
            passed: max_error.is_finite() && max_error <= tolerance,
        }
    }
}

type Scalar = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A random instance: inputs and a scalar function of them.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub f: Scalar,
}

/// Reduce `y` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct amount.
fn project(t: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = t.constant(w.clone());
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = 0.3 + rng.random::<f64>() as Real;
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| 0.3 + rng.random::<f64>() as Real)
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Case whose output is `op(inputs)` projected onto random weights of
/// shape `out`.
fn unary_case(inputs: Vec<Tensor>, out: &[usize], rng: &mut Rng, op: fn(&mut Tape, &[Var]) -> Result<Var>) -> Case {
    let w = randn(out, rng);
    Case {
        inputs,
        f: Box::new(move |t, v| {
            let y = op(t, v)?;
            project(t, y, &w)
        }),
    }
}

pub type CaseBuilder = fn(&mut Rng) -> Case;

/// Every primitive on the tape, by name.
pub fn primitive_cases() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("add", |r| unary_case(vec![randn(&[3, 4], r), randn(&[3, 4], r)], &[3, 4], r, |t, v| t.add(v[0], v[1]))),
        ("sub", |r| unary_case(vec![randn(&[3, 4], r), randn(&[3, 4], r)], &[3, 4], r, |t, v| t.sub(v[0], v[1]))),
        ("mul", |r| unary_case(vec![randn(&[3, 4], r), randn(&[3, 4], r)], &[3, 4], r, |t, v| t.mul(v[0], v[1]))),
        ("div", |r| {
            unary_case(vec![randn(&[3, 4], r), away_from_zero(&[3, 4], r)], &[3, 4], r, |t, v| t.div(v[0], v[1]))
        }),
        ("add_row", |r| unary_case(vec![randn(&[3, 4], r), randn(&[4], r)], &[3, 4], r, |t, v| t.add_row(v[0], v[1]))),
        ("mul_row", |r| unary_case(vec![randn(&[3, 4], r), randn(&[4], r)], &[3, 4], r, |t, v| t.mul_row(v[0], v[1]))),
        ("mul_col", |r| {
            unary_case(vec![randn(&[3, 4], r), randn(&[3, 1], r)], &[3, 4], r, |t, v| t.mul_col(v[0], v[1]))
        }),
        ("scale", |r| unary_case(vec![randn(&[3, 4], r)], &[3, 4], r, |t, v| Ok(t.scale(v[0], -1.7)))),
        ("offset", |r| unary_case(vec![randn(&[3, 4], r)], &[3, 4], r, |t, v| Ok(t.offset(v[0], 0.4)))),
        ("matmul", |r| unary_case(vec![randn(&[3, 4], r), randn(&[4, 2], r)], &[3, 2], r, |t, v| t.matmul(v[0], v[1]))),
        ("linear", |r| {
            unary_case(vec![randn(&[3, 4], r), randn(&[4, 2], r), randn(&[2], r)], &[3, 2], r, |t, v| {
                t.linear(v[0], v[1], v[2])
            })
        }),
        ("exp", |r| unary_case(vec![randn(&[3, 4], r)], &[3, 4], r, |t, v| Ok(t.exp(v[0])))),
        ("log", |r| unary_case(vec![positive(&[3, 4], r)], &[3, 4], r, |t, v| Ok(t.log(v[0])))),
        ("neg", |r| unary_case(vec![randn(&[3, 4], r)], &[3, 4], r, |t, v| Ok(t.neg(v[0])))),
        ("abs", |r| unary_case(vec![away_from_zero(&[3, 4], r)], &[3, 4], r, |t, v| Ok(t.abs(v[0])))),
        ("sqrt", |r| unary_case(vec![positive(&[3, 4], r)], &[3, 4], r, |t, v| Ok(t.sqrt(v[0])))),
        ("square", |r| unary_case(vec![randn(&[3, 4], r)], &[3, 4], r, |t, v| Ok(t.square(v[0])))),
        ("sigmoid", |r| unary_case(vec![randn(&[3, 4], r)], &[3, 4], r, |t, v| Ok(t.sigmoid(v[0])))),
        ("silu", |r| unary_case(vec![randn(&[3, 4], r)], &[3, 4], r, |t, v| Ok(t.silu(v[0])))),
        ("gelu", |r| unary_case(vec![randn(&[3, 4], r)], &[3, 4], r, |t, v| Ok(t.gelu(v[0])))),
        ("softplus", |r| unary_case(vec![randn(&[3, 4], r)], &[3, 4], r, |t, v| Ok(t.softplus(v[0])))),
        ("layer_norm", |r| {
            unary_case(vec![randn(&[3, 5], r), randn(&[5], r), randn(&[5], r)], &[3, 5], r, |t, v| {
                t.layer_norm(v[0], v[1], v[2], 1e-5)
            })
        }),
        ("layer_norm_scale", |r| {
            unary_case(vec![randn(&[3, 5], r), randn(&[5], r)], &[3, 5], r, |t, v| {
                t.layer_norm_scale(v[0], v[1], 1e-5)
            })
        }),
        ("depthwise_conv1d_causal", |r| {
            unary_case(vec![randn(&[6, 3], r), randn(&[4, 3], r), randn(&[3], r)], &[6, 3], r, |t, v| {
                t.depthwise_conv1d_causal(v[0], v[1], v[2])
            })
        }),
        ("attention", |r| {
            unary_case(vec![randn(&[3, 4], r), randn(&[5, 4], r), randn(&[5, 6], r)], &[3, 6], r, |t, v| {
                t.attention(v[0], v[1], v[2], 2)
            })
        }),
        ("concat_rows", |r| {
            unary_case(vec![randn(&[2, 3], r), randn(&[3, 3], r)], &[5, 3], r, |t, v| t.concat_rows(&[v[0], v[1]]))
        }),
        ("concat_cols", |r| {
            unary_case(vec![randn(&[3, 2], r), randn(&[3, 3], r)], &[3, 5], r, |t, v| t.concat_cols(&[v[0], v[1]]))
        }),
        ("slice_rows", |r| unary_case(vec![randn(&[5, 3], r)], &[2, 3], r, |t, v| t.slice_rows(v[0], 1, 2))),
        ("slice_cols", |r| unary_case(vec![randn(&[3, 5], r)], &[3, 2], r, |t, v| t.slice_cols(v[0], 2, 2))),
        ("tile_rows", |r| unary_case(vec![randn(&[2, 3], r)], &[6, 3], r, |t, v| t.tile_rows(v[0], 3))),
        ("reshape", |r| unary_case(vec![randn(&[3, 4], r)], &[2, 6], r, |t, v| t.reshape(v[0], &[2, 6]))),
        ("sum", |r| unary_case(vec![randn(&[3, 4], r)], &[1], r, |t, v| Ok(t.sum(v[0])))),
        ("mean", |r| unary_case(vec![randn(&[3, 4], r)], &[1], r, |t, v| Ok(t.mean(v[0])))),
        ("mean_rows", |r| unary_case(vec![randn(&[3, 4], r)], &[1, 4], r, |t, v| t.mean_rows(v[0]))),
        ("sum_cols", |r| unary_case(vec![randn(&[3, 4], r)], &[3, 1], r, |t, v| t.sum_cols(v[0]))),
        ("normalize_rows", |r| unary_case(vec![away_from_zero(&[3, 4], r)], &[3, 4], r, |t, v| t.normalize_rows(v[0]))),
        ("selective_scan", scan_case),
    ]
}

/// Well-conditioned scan operands: steps in `[0.05, 0.95]`, decays in
/// `[-2.2, -1.2]`.
pub fn random_scan_inputs(rng: &mut Rng, s: usize, di: usize, n: usize) -> (ScanInputs, SsmState) {
    let inputs = ScanInputs {
        u: randn(&[s, di], rng),
        delta: Tensor::uniform(&[s, di], 0.45, rng).map(|v| v + 0.5),
        a: Tensor::uniform(&[di, n], 0.5, rng).map(|v| v - 1.7),
        b: randn(&[s, n], rng),
        c: randn(&[s, n], rng),
        d_skip: randn(&[di], rng),
    };
    let h0 = SsmState { h: randn(&[di, n], rng) };
    (inputs, h0)
}

fn scan_case(rng: &mut Rng) -> Case {
    let (x, h0) = random_scan_inputs(rng, 5, 3, 2);
    let wy = randn(&[5, 3], rng);
    let wh = randn(&[3, 2], rng);
    Case {
        inputs: vec![x.u, x.delta, x.a, x.b, x.c, x.d_skip, h0.h],
        f: Box::new(move |t, v| {
            let (y, h) = scan_on_tape(t, v[0], v[1], v[2], v[3], v[4], v[5], v[6])?;
            let a = project(t, y, &wy)?;
            let b = project(t, h, &wh)?;
            t.add(a, b)
        }),
    }
}

fn mamba_case(rng: &mut Rng) -> Case {
    let cfg = MambaConfig {
        d_model: 4,
        d_inner: 6,
        d_state: 3,
        conv_width: 3,
        residual: Residual::Input,
    };
    let mut p = MambaBlockParams::init(&cfg, rng);
    p.ssm.delta_proj.w = Tensor::randn(&[6, 6], 0.3, rng);
    p.norm.gamma = randn(&[4], rng);
    let mut inputs = leaves(&p);
    let k = inputs.len();
    inputs.push(randn(&[5, 4], rng));
    inputs.push(Tensor::randn(&[6, 3], 0.5, rng));
    let wf = randn(&[5, 4], rng);
    let wh = randn(&[6, 3], rng);
    Case {
        inputs,
        f: Box::new(move |t, v| {
            let bound = with_leaves(&p, &v[..k])?;
            let (f, h) = bound.forward(t, v[k], v[k + 1])?;
            let a = project(t, f, &wf)?;
            let b = project(t, h, &wh)?;
            t.add(a, b)
        }),
    }
}

fn inject_attention_case(rng: &mut Rng) -> Case {
    let (d, s) = (4, 3);
    let mut out_rng = rng_from_seed(rng.random());
    let p = InjectorParams::init(&[0], d, 5, OutputInit::Random, rng, &mut out_rng);
    let layer = p.layers[0].clone();
    let mut inputs = leaves(&layer);
    let k = inputs.len();
    for _ in 0..5 {
        inputs.push(randn(&[s, d], rng));
    }
    let w = randn(&[s, d], rng);
    Case {
        inputs,
        f: Box::new(move |t, v| {
            let l = with_leaves(&layer, &v[..k])?;
            let (kk, vv) = l.inject(t, v[k + 1], v[k + 2], v[k + 3], v[k + 4])?;
            let a = t.attention(v[k], kk, vv, 2)?;
            project(t, a, &w)
        }),
    }
}

fn heads_case(rng: &mut Rng) -> Case {
    let (d, n, frames) = (4, 3, 2);
    let p = HeadParams::init(d, rng);
    let mut inputs = leaves(&p);
    let k = inputs.len();
    inputs.push(randn(&[frames * n, d], rng));
    let ws: Vec<[Tensor; 4]> = (0..frames)
        .map(|_| [randn(&[n, 3], rng), randn(&[n, 1], rng), randn(&[1, 4], rng), randn(&[1, 3], rng)])
        .collect();
    Case {
        inputs,
        f: Box::new(move |t, v| {
            let bound = with_leaves(&p, &v[..k])?;
            let preds = bound.predict(t, v[k], frames)?;
            let mut acc = None;
            for (pv, w) in preds.iter().zip(&ws) {
                for (x, w) in [pv.pointmap, pv.depth, pv.rotation, pv.translation].into_iter().zip(w) {
                    let s = project(t, x, w)?;
                    acc = Some(match acc {
                        None => s,
                        Some(a) => t.add(a, s)?,
                    });
                }
            }
            Ok(acc.expect("at least one frame"))
        }),
    }
}

fn random_gt(rng: &mut Rng, n: usize) -> Predictions {
    let q = randn(&[4], rng);
    let norm = q.data().iter().map(|x| x * x).sum::<Real>().sqrt();
    let r = q.data();
    Predictions {
        pose: Pose {
            rotation: [r[0] / norm, r[1] / norm, r[2] / norm, r[3] / norm],
            translation: [randn(&[1], rng).data()[0], 0.5, -0.25],
        },
        depth: positive(&[1, n], rng),
        pointmap: randn(&[n, 3], rng),
    }
}

fn loss_case(rng: &mut Rng) -> Case {
    let (n, frames) = (3, 2);
    let gts: Vec<Predictions> = (0..frames).map(|_| random_gt(rng, n)).collect();
    let mut inputs = Vec::new();
    for g in &gts {
        inputs.push(randn(&[n, 3], rng));
        inputs.push(positive(&[n, 1], rng));
        // keep ⟨q, q_gt⟩ away from the kink of |·|
        let q = g.pose.rotation.map(|x| x + 0.1 * randn(&[1], rng).data()[0]);
        let q = Tensor::new(vec![1, 4], q.to_vec()).expect("4 values");
        inputs.push(q);
        inputs.push(randn(&[1, 3], rng));
    }
    Case {
        inputs,
        f: Box::new(move |t, v| {
            let preds: Vec<_> = v
                .chunks_exact(4)
                .map(|c| crate::backbone::PredVars {
                    pointmap: c[0],
                    depth: c[1],
                    rotation: c[2],
                    translation: c[3],
                })
                .collect();
            let refs: Vec<&Predictions> = gts.iter().collect();
            Ok(loss_on_tape(t, &preds, &refs)?.total)
        }),
    }
}

/// Composed functions checked at the looser tolerance.
pub fn composed_cases() -> Vec<(&'static str, &'static str, CaseBuilder)> {
    vec![
        ("ssm", "mamba_block", mamba_case),
        ("injector", "inject_kv+attention", inject_attention_case),
        ("backbone", "heads", heads_case),
        ("pipeline", "multi_task_loss", loss_case),
    ]
}

fn run_case(build: CaseBuilder, seed: u64) -> Result<Real> {
    let case = build(&mut rng_from_seed(seed));
    Ok(check_gradient(&case.f, &case.inputs, EPS)?.max_rel_error)
}

fn worst(build: CaseBuilder, seeds: u64, base: u64) -> Result<Real> {
    let mut m: Real = 0.0;
    for s in 0..seeds {
        m = m.max(run_case(build, base + s)?);
    }
    Ok(m)
}

/// Every primitive over `seeds` random instances.
pub fn primitive_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    primitive_cases()
        .into_iter()
        .map(|(name, build)| {
            Ok(CheckResult::new("numerics", name, seeds as usize, worst(build, seeds, 0)?, PRIMITIVE_TOL))
        })
        .collect()
}

/// The composed functions over `seeds` random instances.
pub fn composed_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    composed_cases()
        .into_iter()
        .map(|(module, name, build)| {
            Ok(CheckResult::new(module, name, seeds as usize, worst(build, seeds, 0)?, COMPOSED_TOL))
        })
        .collect()
}

/// Chunked against sequential scans on `instances` random problems of up
/// to 64 steps, and split-versus-whole state carrying.
pub fn scan_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng_from_seed(seed);
    let mut chunk_err: Real = 0.0;
    let mut split_err: Real = 0.0;
    for _ in 0..instances {
        let s = rng.random_range(1..=64);
        let di = rng.random_range(1..=6);
        let n = rng.random_range(1..=5);
        let chunk = rng.random_range(1..=s);
        let (x, h0) = random_scan_inputs(&mut rng, s, di, n);
        let (y_seq, h_seq) = scan_sequential(&x, &h0)?;
        let (y_chk, h_chk) = scan_chunked(&x, &h0, chunk)?;
        chunk_err = chunk_err.max(y_seq.max_abs_diff(&y_chk)).max(h_seq.h.max_abs_diff(&h_chk.h));

        let cut = rng.random_range(0..=s);
        let part = |start: usize, len: usize| -> Result<ScanInputs> {
            Ok(ScanInputs {
                u: x.u.slice_rows(start, len)?,
                delta: x.delta.slice_rows(start, len)?,
                a: x.a.clone(),
                b: x.b.slice_rows(start, len)?,
                c: x.c.slice_rows(start, len)?,
                d_skip: x.d_skip.clone(),
            })
        };
        if cut > 0 && cut < s {
            let (y1, h1) = scan_sequential(&part(0, cut)?, &h0)?;
            let (y2, h2) = scan_sequential(&part(cut, s - cut)?, &h1)?;
            let y = Tensor::concat_rows(&[&y1, &y2])?;
            split_err = split_err.max(y.max_abs_diff(&y_seq)).max(h2.h.max_abs_diff(&h_seq.h));
        }
    }
    Ok(vec![
        CheckResult::new("ssm", "chunked_vs_sequential", instances, chunk_err, SCAN_TOL),
        CheckResult::new("ssm", "split_state_carry", instances, split_err, 0.0),
    ])
}
