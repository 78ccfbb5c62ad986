//! One test per acceptance criterion. Each writes a single
//! `criterion N: PASS|FAIL ...` line straight to stdout so it shows up
//! even when the harness captures output. A shared lock keeps the timing
//! and training criteria from running concurrently.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng as _;
use swm_core::backbone::ParamGroup;
use swm_core::harness::checks::{composed_suite, primitive_suite, scan_suite};
use swm_core::harness::*;
use swm_core::injector::InjectionMode;
use swm_core::memory::{MemoryBuffer, MemoryConfig, Stream};
use swm_core::numerics::{rng_from_seed, Real, Tensor};
use swm_core::pipeline::*;
use swm_core::ssm::Residual;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: u32, pass: bool, detail: String, started: Instant) {
    let line = format!(
        "criterion {n}: {} {detail} ({:.1} s)\n",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n} failed: {detail}");
}

fn lock() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn random_config(rng: &mut swm_core::numerics::Rng, seed: u64) -> RunConfig {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let blocks = rng.random_range(1..=3);
    let window = rng.random_range(1..=4);
    let inject_layers: Vec<usize> = (0..blocks).filter(|_| rng.random_bool(0.7)).collect();
    RunConfig {
        seed,
        memory_horizon: rng.random_range(1..=5),
        window,
        stride: rng.random_range(1..=window),
        alpha: rng.random_range(0.0..=1.0),
        per_frame_entries: rng.random_bool(0.3),
        d_model: heads * [2, 4][rng.random_range(0..2)],
        blocks,
        heads,
        image_size: [14, 28][rng.random_range(0..2)],
        patch: 7,
        channels: rng.random_range(1..=3),
        temporal_encoding: rng.random_bool(0.5),
        feature_layer: rng.random_bool(0.5).then(|| rng.random_range(0..blocks)),
        d_state: rng.random_range(1..=6),
        conv_width: rng.random_range(1..=4),
        residual: if rng.random_bool(0.5) { Residual::Input } else { Residual::Normalized },
        share_kv_mamba: rng.random_bool(0.3),
        inject_layers,
        injection_mode: InjectionMode::TrailingSlice,
        noise: rng.random_range(0.0..1.0),
        ..RunConfig::default()
    }
}

#[test]
fn criterion_1_cold_start_identity() {
    let _g = lock();
    let t = Instant::now();
    let mut rng = rng_from_seed(1);
    let mut worst: Real = 0.0;
    for i in 0..50 {
        let cfg = random_config(&mut rng, 1000 + i);
        let model = Model::new(cfg.clone()).unwrap();
        let n = rng.random_range(1..=20);
        let motion = Motion::ALL[rng.random_range(0..3)];
        let scene = gen_scene(cfg.seed, n, motion, &SceneSpec::from_config(&cfg)).unwrap();
        worst = worst.max(ablation::identity_deviation(&model, &scene).unwrap());
    }
    report(1, worst <= 1e-12, format!("50 configs, max deviation {worst:.3e} (tol 1e-12)"), t);
}

#[test]
fn criterion_2_scan_equivalence() {
    let _g = lock();
    let t = Instant::now();
    let r = scan_suite(1000, 2).unwrap();
    let detail = r
        .iter()
        .map(|c| format!("{} {:.3e} (tol {:.0e})", c.name, c.max_error, c.tolerance))
        .collect::<Vec<_>>()
        .join(", ");
    report(2, r.iter().all(|c| c.passed), format!("1000 instances: {detail}"), t);
}

#[test]
fn criterion_3_gradient_correctness() {
    let _g = lock();
    let t = Instant::now();
    let prim = primitive_suite(20).unwrap();
    let comp = composed_suite(20).unwrap();
    let worst = |rs: &[swm_core::harness::checks::CheckResult]| rs.iter().map(|c| c.max_error).fold(0.0, Real::max);
    let failed: Vec<String> = prim.iter().chain(&comp).filter(|c| !c.passed).map(|c| format!("{}/{}", c.module, c.name)).collect();
    report(
        3,
        failed.is_empty(),
        format!(
            "{} primitives max {:.3e} (tol 1e-6), {} composed max {:.3e} (tol 1e-4), 20 seeds each{}",
            prim.len(),
            worst(&prim),
            comp.len(),
            worst(&comp),
            if failed.is_empty() { String::new() } else { format!("; failing {failed:?}") }
        ),
        t,
    );
}

#[test]
fn criterion_4_fifo_queue_oracle() {
    let _g = lock();
    let t = Instant::now();
    let mut rng = rng_from_seed(4);
    let mut mismatches = 0;
    let mut over = 0;
    for _ in 0..10_000 {
        let capacity = rng.random_range(1..=8);
        let cfg = MemoryConfig {
            capacity,
            alpha: rng.random_range(0.0..=1.0),
            d_k: 2,
            d_v: 2,
            state: (2, 2),
        };
        let mut buf = MemoryBuffer::new(cfg).unwrap();
        let mut reference: VecDeque<(Tensor, Tensor)> = VecDeque::new();
        for _ in 0..rng.random_range(0..=25) {
            let [k, v, raw] = [0; 3].map(|_| Tensor::from_fn(&[1, 2], |_| rng.random_range(-1.0..1.0)));
            buf.update(&k, &v, &raw).unwrap();
            let blend = |x: &Tensor| Tensor::from_fn(&[1, 2], |i| cfg.alpha * x.data()[i] + (1.0 - cfg.alpha) * raw.data()[i]);
            reference.push_back((blend(&k), blend(&v)));
            if reference.len() > capacity {
                reference.pop_front();
            }
            over += usize::from(buf.len() > capacity);
            let ks: Vec<&Tensor> = buf.entries(Stream::K).collect();
            let vs: Vec<&Tensor> = buf.entries(Stream::V).collect();
            let same = ks.len() == reference.len()
                && ks.iter().zip(&reference).all(|(a, (b, _))| *a == b)
                && vs.iter().zip(&reference).all(|(a, (_, b))| *a == b);
            mismatches += usize::from(!same);
        }
    }
    report(
        4,
        mismatches == 0 && over == 0,
        format!("10000 sequences, {mismatches} content mismatches, {over} length violations"),
        t,
    );
}

#[test]
fn criterion_5_and_6_scaling_and_footprint() {
    let _g = lock();
    let t = Instant::now();
    let cfg = bench_config(0);
    let counts = [50, 100, 200, 400];
    let recs = bench_scaling(&cfg, &counts, &[Method::Memory, Method::FullGlobalAttention], 5).unwrap();
    let mem = method_exponent(&recs, Method::Memory).unwrap();
    let full = method_exponent(&recs, Method::FullGlobalAttention).unwrap();
    let times: Vec<String> = recs.iter().map(|r| format!("{}@{}={:.3}s", r.method, r.frames, r.seconds)).collect();
    let pass5 = mem <= 1.3 && full >= 1.7;
    let line5 = format!("exponents memory {mem:.3} (≤ 1.3), full-global-attention {full:.3} (≥ 1.7); {}", times.join(" "));

    let t6 = Instant::now();
    let model = Model::new(cfg.clone()).unwrap();
    let scene = gen_scene(cfg.seed, 400, Motion::Orbit, &SceneSpec::from_config(&cfg)).unwrap();
    let imgs = scene.images();
    let short = run_stream(&model, &imgs[..50]).unwrap().peak_retained_bytes;
    let long = run_stream(&model, &imgs).unwrap().peak_retained_bytes;
    let bench_bytes: Vec<usize> = recs.iter().filter(|r| r.method == Method::Memory).map(|r| r.peak_bytes).collect();
    let pass6 = short == long && bench_bytes.iter().all(|&b| b == bench_bytes[0]);
    let line6 = format!("retained bytes {short} at 50 frames, {long} at 400; bench peak bytes {bench_bytes:?}");

    let r5 = std::panic::catch_unwind(|| report(5, pass5, line5, t));
    report(6, pass6, line6, t6);
    if let Err(e) = r5 {
        std::panic::resume_unwind(e);
    }
}

#[test]
fn criterion_7_ablation_direction() {
    let _g = lock();
    let t = Instant::now();
    let base = ablation_config(0);
    let seeds: Vec<u64> = (0..10).collect();
    let table = run_ablation(&base, &Arm::ALL, &seeds, base.train_frames).unwrap();
    let full = table.arm(Arm::Full).unwrap();
    let mut pass = full.step0_identity_deviation <= 1e-12;
    let mut parts = vec![format!(
        "full drift {:.4} mse {:.4}",
        full.mean_endpoint_drift, full.mean_pointmap_mse
    )];
    for arm in [Arm::NoMambaUpdate, Arm::NoMemory, Arm::NoZeroInit] {
        let a = table.arm(arm).unwrap();
        let ok = full.mean_endpoint_drift <= a.mean_endpoint_drift && full.mean_pointmap_mse <= a.mean_pointmap_mse;
        pass &= ok;
        parts.push(format!(
            "{arm} drift {:.4} mse {:.4}{}",
            a.mean_endpoint_drift,
            a.mean_pointmap_mse,
            if ok { "" } else { " [full not ≤]" }
        ));
    }
    let broken = table.arm(Arm::NoZeroInit).unwrap().step0_identity_deviation;
    pass &= broken > 0.0;
    parts.push(format!("w/o-zero-init step-0 deviation {broken:.3e}"));
    report(7, pass, format!("10 seeds: {}", parts.join("; ")), t);
}

#[test]
fn criterion_8_stage1_freeze_contract() {
    let _g = lock();
    let t = Instant::now();
    let cfg = RunConfig::default();
    let scene = gen_scene(cfg.seed, cfg.train_frames, cfg.motion, &SceneSpec::from_config(&cfg)).unwrap();
    let imgs = scene.images();
    let data = Dataset {
        images: &imgs,
        ground_truth: &scene.ground_truth,
    };
    let init = ModelParams::init(&cfg);
    let before_hash = init.group_hash(ParamGroup::Backbone);
    let before = evaluate_loss(&cfg, &init, data).unwrap().total;
    let plan = StagePlan {
        windows_per_step: vec![cfg.train_windows; 200],
        ..Stage::WarmUp.plan(&cfg)
    };
    let mut log = Vec::new();
    let trained = train_stage(&cfg, init, data, &plan, &mut log).unwrap();
    let after = evaluate_loss(&cfg, &trained, data).unwrap().total;
    let same = trained.group_hash(ParamGroup::Backbone) == before_hash;
    report(
        8,
        same && after < before && log.len() == 200,
        format!("backbone hash unchanged: {same}; full-sequence loss {before:.4} -> {after:.4} over {} steps", log.len()),
        t,
    );
}

#[test]
fn criterion_9_determinism() {
    let _g = lock();
    let t = Instant::now();
    let cfg = RunConfig {
        seed: 9,
        d_model: 16,
        blocks: 2,
        inject_layers: vec![0, 1],
        stage1_steps: 20,
        stage2_steps: 6,
        stage2_ladder: vec![2, 4],
        train_frames: 24,
        ..RunConfig::default()
    };
    let run = || {
        let scene = gen_scene(cfg.seed, cfg.train_frames, cfg.motion, &SceneSpec::from_config(&cfg)).unwrap();
        let imgs = scene.images();
        let out = train(
            &cfg,
            Dataset {
                images: &imgs,
                ground_truth: &scene.ground_truth,
            },
        )
        .unwrap();
        let mut log = Vec::new();
        write_log(&out.log, &mut log).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &cfg, &out.params).unwrap();
        let bin = std::fs::read(dir.path().join(PARAMS_FILE)).unwrap();
        let json = std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        (log, bin, json)
    };
    let a = run();
    let b = run();
    report(
        9,
        a == b && !a.0.is_empty(),
        format!(
            "logs identical: {}, checkpoint bytes identical: {} ({} log bytes, {} param bytes)",
            a.0 == b.0,
            a.1 == b.1 && a.2 == b.2,
            a.0.len(),
            a.1.len()
        ),
        t,
    );
}
