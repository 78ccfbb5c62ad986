use proptest::prelude::*;
use swm_core::error::Error;
use swm_core::harness::checks::primitive_suite;
use swm_core::numerics::{
    check_gradient, depthwise_conv1d_causal, layer_norm, rng_from_seed, softmax_attention, Real, Tensor,
};

fn t(shape: &[usize], data: &[Real]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let x = Tensor::full(&[1, 6], 3.5);
    let y = layer_norm(&x, &Tensor::ones(&[6]), &Tensor::zeros(&[6]), 1e-5).unwrap();
    assert!(y.max_abs() == 0.0);
}

#[test]
fn layer_norm_of_unit_pair() {
    let x = t(&[1, 2], &[1.0, -1.0]);
    let y = layer_norm(&x, &t(&[2], &[2.0, 2.0]), &Tensor::zeros(&[2]), 1e-12).unwrap();
    assert!(y.max_abs_diff(&t(&[1, 2], &[2.0, -2.0])) <= 1e-10);
}

#[test]
fn layer_norm_rows_are_standardized_seed0() {
    let mut rng = rng_from_seed(0);
    let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let eps = 1e-5;
    let y = layer_norm(&x, &Tensor::ones(&[8]), &Tensor::zeros(&[8]), eps).unwrap();
    for r in 0..4 {
        let row = y.row(r);
        let mean = row.iter().sum::<Real>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / 8.0;
        let xr = x.row(r);
        let xm = xr.iter().sum::<Real>() / 8.0;
        let xv = xr.iter().map(|v| (v - xm) * (v - xm)).sum::<Real>() / 8.0;
        assert!(mean.abs() <= 1e-12);
        assert!((var - xv / (xv + eps)).abs() <= 1e-12);
    }
}

#[test]
fn layer_norm_width_mismatch_is_shape_error() {
    let r = layer_norm(&Tensor::zeros(&[2, 3]), &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5);
    assert!(matches!(r, Err(Error::Shape(_))));
}

#[test]
fn delta_kernel_is_identity() {
    let mut rng = rng_from_seed(11);
    let x = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let mut k = vec![0.0; 4 * 3];
    k[9..12].fill(1.0);
    let y = depthwise_conv1d_causal(&x, &t(&[4, 3], &k), &Tensor::zeros(&[3])).unwrap();
    assert_eq!(y, x);
}

#[test]
fn ones_kernel_is_a_capped_running_sum() {
    let y = depthwise_conv1d_causal(&Tensor::ones(&[5, 2]), &Tensor::ones(&[3, 2]), &Tensor::zeros(&[2])).unwrap();
    for (s, want) in [1.0, 2.0, 3.0, 3.0, 3.0].into_iter().enumerate() {
        assert_eq!(y.row(s), &[want, want]);
    }
}

#[test]
fn conv_matches_direct_sum_seed1() {
    let mut rng = rng_from_seed(1);
    let (s, d, k) = (6, 4, 4);
    let x = Tensor::randn(&[s, d], 1.0, &mut rng);
    let w = Tensor::randn(&[k, d], 1.0, &mut rng);
    let b = Tensor::randn(&[d], 1.0, &mut rng);
    let y = depthwise_conv1d_causal(&x, &w, &b).unwrap();
    for i in 0..s {
        for c in 0..d {
            let mut acc = b.data()[c];
            for j in 0..k {
                let src = i as isize - k as isize + 1 + j as isize;
                if src >= 0 {
                    acc += w.row(j)[c] * x.row(src as usize)[c];
                }
            }
            assert!((y.row(i)[c] - acc).abs() <= 1e-12);
        }
    }
}

#[test]
fn conv_channel_mismatch_is_shape_error() {
    let r = depthwise_conv1d_causal(&Tensor::zeros(&[4, 3]), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[3]));
    assert!(matches!(r, Err(Error::Shape(_))));
}

#[test]
fn single_key_returns_its_value() {
    let mut rng = rng_from_seed(12);
    let q = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let k = Tensor::randn(&[1, 4], 1.0, &mut rng);
    let v = Tensor::randn(&[1, 5], 1.0, &mut rng);
    let y = softmax_attention(&q, &k, &v).unwrap();
    for r in 0..3 {
        for (a, b) in y.row(r).iter().zip(v.row(0)) {
            assert!((a - b).abs() <= 1e-15);
        }
    }
}

#[test]
fn orthogonal_query_averages_values() {
    let q = t(&[1, 2], &[0.0, 1.0]);
    let k = t(&[3, 2], &[1.0, 0.0, -2.0, 0.0, 0.5, 0.0]);
    let v = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let y = softmax_attention(&q, &k, &v).unwrap();
    assert!(y.max_abs_diff(&t(&[1, 2], &[3.0, 4.0])) <= 1e-14);
}

#[test]
fn attention_matches_softmax_formula_seed2() {
    let mut rng = rng_from_seed(2);
    let q = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let k = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let v = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let y = softmax_attention(&q, &k, &v).unwrap();
    let scale = 1.0 / (8.0 as Real).sqrt();
    for i in 0..3 {
        let logits: Vec<Real> = (0..5)
            .map(|j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<Real>() * scale)
            .collect();
        let z: Real = logits.iter().map(|l| l.exp()).sum();
        for c in 0..8 {
            let want: Real = (0..5).map(|j| logits[j].exp() / z * v.row(j)[c]).sum();
            assert!((y.row(i)[c] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn empty_context_is_rejected() {
    let r = softmax_attention(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[0, 3]), &Tensor::zeros(&[0, 3]));
    assert!(matches!(r, Err(Error::EmptyContext)));
}

#[test]
fn every_primitive_matches_central_differences_over_100_seeds() {
    for r in primitive_suite(100).unwrap() {
        assert!(r.passed, "{}: {}", r.name, r.max_error);
    }
}

#[test]
fn gradcheck_of_sum_is_exact() {
    let mut rng = rng_from_seed(13);
    let x = Tensor::randn(&[3, 3], 1.0, &mut rng);
    let r = check_gradient(|t, v| Ok(t.sum(v[0])), &[x], 1e-6).unwrap();
    assert!(r.max_rel_error <= 1e-9);
}

fn weights(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-3.0..3.0 as Real, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_weights_sum_to_one(seed in any::<u64>(), sq in 1usize..5, sk in 1usize..7, d in 1usize..6) {
        // With V = all ones, every output entry is the row's weight sum.
        let mut rng = rng_from_seed(seed);
        let q = Tensor::randn(&[sq, d], 2.0, &mut rng);
        let k = Tensor::randn(&[sk, d], 2.0, &mut rng);
        let y = softmax_attention(&q, &k, &Tensor::ones(&[sk, 3])).unwrap();
        for v in y.data() {
            prop_assert!((v - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_never_reads_the_future(x in weights(7, 3), kernel in weights(4, 3), cut in 0usize..7) {
        let b = Tensor::zeros(&[3]);
        let y = depthwise_conv1d_causal(&x, &kernel, &b).unwrap();
        let mut masked = x.data().to_vec();
        masked[cut * 3..].fill(0.0);
        let y2 = depthwise_conv1d_causal(&Tensor::new(vec![7, 3], masked).unwrap(), &kernel, &b).unwrap();
        prop_assert_eq!(&y.data()[..cut * 3], &y2.data()[..cut * 3]);
    }

    #[test]
    fn layer_norm_ignores_row_offsets(x in weights(3, 5), shift in proptest::collection::vec(-50.0..50.0 as Real, 3)) {
        let g = Tensor::ones(&[5]);
        let b = Tensor::zeros(&[5]);
        let shifted = Tensor::from_fn(&[3, 5], |i| x.data()[i] + shift[i / 5]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        let y2 = layer_norm(&shifted, &g, &b, 1e-5).unwrap();
        prop_assert!(y.max_abs_diff(&y2) <= 1e-10);
    }
}
