use proptest::prelude::*;
use swm_core::numerics::kernels::{self, matmul};
use swm_core::numerics::{check_gradient, rng_from_seed, Real, Tensor};
use swm_core::params::{leaves, with_leaves};
use swm_core::ssm::*;

fn random_scan(seed: u64, s: usize, di: usize, n: usize) -> (ScanInputs, SsmState) {
    let mut rng = rng_from_seed(seed);
    let inputs = ScanInputs {
        u: Tensor::randn(&[s, di], 1.0, &mut rng),
        delta: Tensor::uniform(&[s, di], 0.45, &mut rng).map(|v| v + 0.5),
        a: Tensor::uniform(&[di, n], 1.0, &mut rng).map(|v| -(v + 1.2)),
        b: Tensor::randn(&[s, n], 1.0, &mut rng),
        c: Tensor::randn(&[s, n], 1.0, &mut rng),
        d_skip: Tensor::randn(&[di], 1.0, &mut rng),
    };
    let h0 = SsmState {
        h: Tensor::randn(&[di, n], 1.0, &mut rng),
    };
    (inputs, h0)
}

fn rows(x: &ScanInputs, start: usize, len: usize) -> ScanInputs {
    ScanInputs {
        u: x.u.slice_rows(start, len).unwrap(),
        delta: x.delta.slice_rows(start, len).unwrap(),
        a: x.a.clone(),
        b: x.b.slice_rows(start, len).unwrap(),
        c: x.c.slice_rows(start, len).unwrap(),
        d_skip: x.d_skip.clone(),
    }
}

#[test]
fn zero_step_freezes_the_state() {
    let (mut x, h0) = random_scan(30, 6, 3, 4);
    x.delta = Tensor::zeros(&[6, 3]);
    let (y, hs) = scan_sequential(&x, &h0).unwrap();
    assert_eq!(hs, h0);
    for s in 0..6 {
        for d in 0..3 {
            let mut want = x.d_skip.data()[d] * x.u.row(s)[d];
            for k in 0..4 {
                want += x.c.row(s)[k] * h0.h.row(d)[k];
            }
            assert!((y.row(s)[d] - want).abs() < 1e-14);
        }
    }
}

#[test]
fn scalar_recurrence_by_hand() {
    let ln2 = (2.0 as Real).ln();
    let x = ScanInputs {
        u: Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(),
        delta: Tensor::full(&[2, 1], ln2),
        a: Tensor::full(&[1, 1], -1.0),
        b: Tensor::ones(&[2, 1]),
        c: Tensor::ones(&[2, 1]),
        d_skip: Tensor::zeros(&[1]),
    };
    let (y, hs) = scan_sequential(&x, &SsmState::zeros(1, 1)).unwrap();
    assert!((y.data()[0] - ln2).abs() < 1e-15);
    assert!((y.data()[1] - 0.5 * ln2).abs() < 1e-15);
    assert!((hs.h.data()[0] - 0.5 * ln2).abs() < 1e-15);
}

/// Independent per-step loop, starting from the parameters.
fn scan_oracle(u: &Tensor, p: &SsmParams, h0: &SsmState) -> (Tensor, Tensor) {
    let (s_len, di) = u.dims2().unwrap();
    let n = p.a_log.shape()[1];
    let mut h = h0.h.clone().into_data();
    let mut y = vec![0.0; s_len * di];
    for s in 0..s_len {
        let us = u.row(s);
        let proj = |lin: &swm_core::params::Linear, j: usize| -> Real {
            let w = lin.w.data();
            let cols = lin.w.shape()[1];
            lin.b.data()[j] + (0..di).map(|i| us[i] * w[i * cols + j]).sum::<Real>()
        };
        let bs: Vec<Real> = (0..n).map(|k| proj(&p.b_proj, k)).collect();
        let cs: Vec<Real> = (0..n).map(|k| proj(&p.c_proj, k)).collect();
        for d in 0..di {
            let z = proj(&p.delta_proj, d);
            let dt = if z > 30.0 { z } else { z.exp().ln_1p() };
            let mut out = p.d_skip.data()[d] * us[d];
            for k in 0..n {
                let a = -p.a_log.data()[d * n + k].exp();
                let i = d * n + k;
                h[i] = (dt * a).exp() * h[i] + dt * bs[k] * us[d];
                out += cs[k] * h[i];
            }
            y[s * di + d] = out;
        }
    }
    (Tensor::new(vec![s_len, di], y).unwrap(), Tensor::new(vec![di, n], h).unwrap())
}

#[test]
fn seeded_scan_matches_step_loop_oracle() {
    let mut rng = rng_from_seed(5);
    let mut p = SsmParams::init(4, 3, &mut rng);
    p.delta_proj.w = Tensor::randn(&[4, 4], 0.5, &mut rng);
    p.d_skip = Tensor::randn(&[4], 1.0, &mut rng);
    let u = Tensor::randn(&[16, 4], 1.0, &mut rng);
    let h0 = SsmState {
        h: Tensor::randn(&[4, 3], 1.0, &mut rng),
    };
    let (y, hs) = selective_scan_sequential(&u, &p, &h0).unwrap();
    let (y_ref, h_ref) = scan_oracle(&u, &p, &h0);
    assert!(y.max_abs_diff(&y_ref) <= 1e-12, "{}", y.max_abs_diff(&y_ref));
    assert!(hs.h.max_abs_diff(&h_ref) <= 1e-12);
}

#[test]
fn chunk_of_one_is_bitwise_sequential() {
    let (x, h0) = random_scan(12, 20, 3, 4);
    let (ys, hs) = scan_sequential(&x, &h0).unwrap();
    let (yc, hc) = scan_chunked(&x, &h0, 1).unwrap();
    assert_eq!(ys, yc);
    assert_eq!(hs, hc);
}

#[test]
fn chunk_covering_everything_matches_sequential() {
    let (x, h0) = random_scan(13, 20, 3, 4);
    let (ys, hs) = scan_sequential(&x, &h0).unwrap();
    let (yc, hc) = scan_chunked(&x, &h0, 20).unwrap();
    assert!(ys.max_abs_diff(&yc) <= 1e-12);
    assert!(hs.h.max_abs_diff(&hc.h) <= 1e-12);
}

#[test]
fn seeded_chunked_scan_matches_sequential() {
    let mut rng = rng_from_seed(6);
    let p = SsmParams::init(8, 16, &mut rng);
    let u = Tensor::randn(&[32, 8], 1.0, &mut rng);
    let h0 = SsmState::zeros(8, 16);
    let (ys, hs) = selective_scan_sequential(&u, &p, &h0).unwrap();
    let (yc, hc) = selective_scan_chunked(&u, &p, &h0, 5).unwrap();
    assert!(ys.max_abs_diff(&yc) <= 1e-10);
    assert!(hs.h.max_abs_diff(&hc.h) <= 1e-10);
}

#[test]
fn carried_state_splits_exactly() {
    let (x, h0) = random_scan(14, 24, 3, 5);
    let (y_all, h_all) = scan_sequential(&x, &h0).unwrap();
    let (y1, h1) = scan_sequential(&rows(&x, 0, 9), &h0).unwrap();
    let (y2, h2) = scan_sequential(&rows(&x, 9, 15), &h1).unwrap();
    assert_eq!(Tensor::concat_rows(&[&y1, &y2]).unwrap(), y_all);
    assert_eq!(h2, h_all);

    let (c1, g1) = scan_chunked(&rows(&x, 0, 9), &h0, 4).unwrap();
    let (c2, g2) = scan_chunked(&rows(&x, 9, 15), &g1, 4).unwrap();
    assert!(Tensor::concat_rows(&[&c1, &c2]).unwrap().max_abs_diff(&y_all) <= 1e-10);
    assert!(g2.h.max_abs_diff(&h_all.h) <= 1e-10);
}

#[test]
fn constant_step_state_stays_within_geometric_bound() {
    for seed in 0..20 {
        let (mut x, _) = random_scan(100 + seed, 64, 3, 4);
        x.delta = Tensor::full(&[64, 3], 0.3);
        let (_, hs) = scan_sequential(&x, &SsmState::zeros(3, 4)).unwrap();
        // every intermediate state obeys the bound too; check them all
        for len in 1..=64 {
            let (_, h) = scan_sequential(&rows(&x, 0, len), &SsmState::zeros(3, 4)).unwrap();
            let decay = x.a.data().iter().map(|a| (0.3 * a).exp()).fold(0.0, Real::max);
            let mut drive: Real = 0.0;
            for s in 0..64 {
                for d in 0..3 {
                    for k in 0..4 {
                        drive = drive.max((0.3 * x.u.row(s)[d] * x.b.row(s)[k]).abs());
                    }
                }
            }
            assert!(decay < 1.0);
            assert!(h.h.max_abs() <= drive / (1.0 - decay) + 1e-12);
        }
        assert!(hs.h.all_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn chunked_equals_sequential(
        seed in any::<u64>(),
        s in 1usize..=64,
        di in 1usize..4,
        n in 1usize..5,
        chunk in 1usize..20,
    ) {
        let (x, h0) = random_scan(seed, s, di, n);
        let (ys, hs) = scan_sequential(&x, &h0).unwrap();
        let (yc, hc) = scan_chunked(&x, &h0, chunk).unwrap();
        prop_assert!(ys.max_abs_diff(&yc) <= 1e-10);
        prop_assert!(hs.h.max_abs_diff(&hc.h) <= 1e-10);
    }
}

#[test]
fn zero_out_projection_is_the_identity() {
    let mut rng = rng_from_seed(40);
    let mut p = MambaBlockParams::init(&MambaConfig::new(8), &mut rng);
    p.out_proj.w = Tensor::zeros(p.out_proj.w.shape());
    p.out_proj.b = Tensor::zeros(p.out_proj.b.shape());
    let m = Tensor::randn(&[10, 8], 2.0, &mut rng);
    let (f, _) = mamba_block(&m, &p, &p.zero_state()).unwrap();
    assert_eq!(f, m);
}

#[test]
fn closed_gate_leaves_the_residual() {
    let mut rng = rng_from_seed(41);
    let mut p = MambaBlockParams::init(&MambaConfig::new(8), &mut rng);
    p.gate_proj.w = Tensor::zeros(p.gate_proj.w.shape());
    p.gate_proj.b = Tensor::full(&[8], -50.0);
    let m = Tensor::randn(&[10, 8], 1.0, &mut rng);
    let (f, _) = mamba_block(&m, &p, &p.zero_state()).unwrap();
    assert!(f.max_abs_diff(&m) <= 1e-6);
}

#[test]
fn width_mismatch_is_a_shape_error() {
    let mut rng = rng_from_seed(42);
    let p = MambaBlockParams::init(&MambaConfig::new(8), &mut rng);
    let m = Tensor::randn(&[4, 6], 1.0, &mut rng);
    assert!(matches!(
        mamba_block(&m, &p, &p.zero_state()),
        Err(swm_core::Error::Shape(_))
    ));
}

/// The block written out directly with kernel functions.
fn block_oracle(m: &Tensor, p: &MambaBlockParams, h0: &SsmState) -> (Tensor, SsmState) {
    let affine = |x: &Tensor, l: &swm_core::params::Linear| {
        let y = matmul(x, &l.w).unwrap();
        let (r, c) = y.dims2().unwrap();
        Tensor::from_fn(&[r, c], |i| y.data()[i] + l.b.data()[i % c])
    };
    let x = kernels::layer_norm(m, &p.norm.gamma, &p.norm.beta, swm_core::params::LN_EPS).unwrap();
    let z = kernels::depthwise_conv1d_causal(&affine(&x, &p.in_proj), &p.conv_kernel, &p.conv_bias).unwrap();
    let a = z.map(kernels::silu);
    let b = affine(&x, &p.gate_proj).map(kernels::silu);
    let (y, hs) = selective_scan_sequential(&a, &p.ssm, h0).unwrap();
    let o = affine(&y, &p.out_proj);
    let gated = o.zip_map(&b, |p, q| p * q).unwrap();
    let skip = match p.residual {
        Residual::Input => m,
        Residual::Normalized => &x,
    };
    (gated.add(skip).unwrap(), hs)
}

#[test]
fn seeded_block_matches_composition_oracle() {
    let mut rng = rng_from_seed(7);
    let p = MambaBlockParams::init(&MambaConfig::new(32), &mut rng);
    let m = Tensor::randn(&[12, 32], 1.0, &mut rng);
    let h0 = SsmState {
        h: Tensor::randn(&[64, 16], 0.5, &mut rng),
    };
    let (f, hs) = mamba_block(&m, &p, &h0).unwrap();
    let (f_ref, h_ref) = block_oracle(&m, &p, &h0);
    assert!(f.max_abs_diff(&f_ref) <= 1e-12, "{}", f.max_abs_diff(&f_ref));
    assert!(hs.h.max_abs_diff(&h_ref.h) <= 1e-12);
}

#[test]
fn normalized_residual_matches_oracle() {
    let mut rng = rng_from_seed(43);
    let mut cfg = MambaConfig::new(6);
    cfg.residual = Residual::Normalized;
    let p = MambaBlockParams::init(&cfg, &mut rng);
    let m = Tensor::randn(&[5, 6], 1.0, &mut rng);
    let (f, _) = mamba_block(&m, &p, &p.zero_state()).unwrap();
    let (f_ref, _) = block_oracle(&m, &p, &p.zero_state());
    assert!(f.max_abs_diff(&f_ref) <= 1e-12);
}

fn block_gradient_error(seed: u64) -> Real {
    let mut rng = rng_from_seed(seed);
    let cfg = MambaConfig {
        d_model: 4,
        d_inner: 6,
        d_state: 3,
        conv_width: 3,
        residual: Residual::Input,
    };
    let mut p = MambaBlockParams::init(&cfg, &mut rng);
    p.ssm.delta_proj.w = Tensor::randn(&[6, 6], 0.3, &mut rng);
    p.norm.gamma = Tensor::randn(&[4], 1.0, &mut rng);
    let m = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let h0 = Tensor::randn(&[6, 3], 0.5, &mut rng);
    let w = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let mut inputs = leaves(&p);
    let k = inputs.len();
    inputs.push(m);
    inputs.push(h0);
    let r = check_gradient(
        |t, v| {
            let bound = with_leaves(&p, &v[..k])?;
            let (f, h) = bound.forward(t, v[k], v[k + 1])?;
            let wv = t.constant(w.clone());
            let fw = t.mul(f, wv)?;
            let sf = t.sum(fw);
            let h2 = t.square(h);
            let sh = t.sum(h2);
            t.add(sf, sh)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    r.max_rel_error
}

#[test]
fn block_gradients_match_differences_over_twenty_seeds() {
    for seed in 0..20 {
        let e = block_gradient_error(1000 + seed);
        assert!(e <= 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn block_gradient_seed_4() {
    assert!(block_gradient_error(4) <= 1e-4);
}
