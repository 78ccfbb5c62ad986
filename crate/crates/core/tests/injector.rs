use swm_core::error::Error;
use swm_core::injector::*;
use swm_core::numerics::kernels::{gelu, matmul};
use swm_core::numerics::{rng_from_seed, softmax_attention, Real, Tape, Tensor};
use swm_core::params::{bind, named_tensors};

fn random_branch(seed: u64, d: usize, mid: usize) -> Branch {
    let mut rng = rng_from_seed(seed);
    Branch {
        w1: Tensor::randn(&[d, mid], 0.5, &mut rng),
        b1: Tensor::randn(&[mid], 0.5, &mut rng),
        w2: Tensor::randn(&[mid, d], 0.5, &mut rng),
        b2: Tensor::randn(&[d], 0.5, &mut rng),
    }
}

fn branch_oracle(x: &Tensor, p: &Branch) -> Tensor {
    let (s, _) = x.dims2().unwrap();
    let mid = p.b1.len();
    let d = p.b2.len();
    let mut h = matmul(x, &p.w1).unwrap().into_data();
    for (i, v) in h.iter_mut().enumerate() {
        *v = gelu(*v + p.b1.data()[i % mid]);
    }
    let mut y = matmul(&Tensor::new(vec![s, mid], h).unwrap(), &p.w2).unwrap().into_data();
    for (i, v) in y.iter_mut().enumerate() {
        *v += p.b2.data()[i % d];
    }
    Tensor::new(vec![s, d], y).unwrap()
}

fn fresh_layer(seed: u64, d: usize) -> InjectorLayer {
    let mut rng = rng_from_seed(seed);
    let mut out = rng_from_seed(seed + 1);
    InjectorParams::init(&[0], d, d, OutputInit::Zero, &mut rng, &mut out).layers.remove(0)
}

#[test]
fn fresh_branch_outputs_zero() {
    let layer = fresh_layer(1, 6);
    let x = Tensor::randn(&[5, 6], 10.0, &mut rng_from_seed(2));
    for b in [&layer.k, &layer.v] {
        assert!(b.w2.max_abs() == 0.0 && b.b2.max_abs() == 0.0);
        assert!(zero_conv_branch(&x, b).unwrap().max_abs() == 0.0);
    }
}

#[test]
fn identity_weights_give_gelu() {
    let d = 4;
    let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    let b = Branch {
        w1: eye.clone(),
        b1: Tensor::zeros(&[d]),
        w2: eye,
        b2: Tensor::zeros(&[d]),
    };
    let x = Tensor::randn(&[3, d], 1.0, &mut rng_from_seed(3));
    let y = zero_conv_branch(&x, &b).unwrap();
    assert!(y.max_abs_diff(&x.map(gelu)) <= 1e-15);
}

#[test]
fn branch_matches_composition_seed8() {
    let p = random_branch(8, 5, 7);
    let x = Tensor::randn(&[4, 5], 1.0, &mut rng_from_seed(80));
    assert!(zero_conv_branch(&x, &p).unwrap().max_abs_diff(&branch_oracle(&x, &p)) <= 1e-12);
}

#[test]
fn branch_width_mismatch_is_shape_error() {
    let p = random_branch(8, 5, 7);
    assert!(matches!(zero_conv_branch(&Tensor::zeros(&[2, 4]), &p), Err(Error::Shape(_))));
}

#[test]
fn fresh_injection_is_identity() {
    let layer = fresh_layer(4, 6);
    let mut rng = rng_from_seed(5);
    let [k, v, kh, vh] = [0; 4].map(|_| Tensor::randn(&[3, 6], 1.0, &mut rng));
    let (k2, v2) = inject_kv(&k, &v, &kh, &vh, &layer).unwrap();
    assert_eq!((k2, v2), (k, v));
}

#[test]
fn zero_memory_with_zero_biases_is_identity() {
    let mut layer = InjectorLayer {
        layer: 0,
        k: random_branch(20, 4, 4),
        v: random_branch(21, 4, 4),
    };
    for b in [&mut layer.k, &mut layer.v] {
        b.b1 = Tensor::zeros(&[4]);
        b.b2 = Tensor::zeros(&[4]);
    }
    let mut rng = rng_from_seed(6);
    let k = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let v = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let z = Tensor::zeros(&[3, 4]);
    assert_eq!(inject_kv(&k, &v, &z, &z, &layer).unwrap(), (k, v));
}

#[test]
fn injection_is_additive_seed9() {
    let layer = InjectorLayer {
        layer: 0,
        k: random_branch(9, 4, 6),
        v: random_branch(90, 4, 6),
    };
    let mut rng = rng_from_seed(91);
    let [k, v, kh, vh] = [0; 4].map(|_| Tensor::randn(&[5, 4], 1.0, &mut rng));
    let (k2, v2) = inject_kv(&k, &v, &kh, &vh, &layer).unwrap();
    assert!(k2.sub(&k).unwrap().max_abs_diff(&zero_conv_branch(&kh, &layer.k).unwrap()) <= 1e-12);
    assert!(v2.sub(&v).unwrap().max_abs_diff(&zero_conv_branch(&vh, &layer.v).unwrap()) <= 1e-12);
}

#[test]
fn token_count_mismatch_is_alignment_error() {
    let layer = fresh_layer(4, 6);
    let k = Tensor::zeros(&[3, 6]);
    let short = Tensor::zeros(&[2, 6]);
    assert!(matches!(inject_kv(&k, &k, &short, &k, &layer), Err(Error::Alignment(_))));
}

#[test]
fn fresh_injector_leaves_attention_unchanged() {
    let layer = fresh_layer(7, 4);
    let mut rng = rng_from_seed(70);
    let [q, k, v, kh, vh] = [0; 5].map(|_| Tensor::randn(&[3, 4], 1.0, &mut rng));
    let (k2, v2) = inject_kv(&k, &v, &kh, &vh, &layer).unwrap();
    assert_eq!(attend_with_memory(&q, &k2, &v2).unwrap(), softmax_attention(&q, &k, &v).unwrap());
}

#[test]
fn dominant_memory_key_selects_its_value() {
    let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let k = Tensor::zeros(&[3, 2]);
    let v = Tensor::new(vec![3, 2], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
    // branch adds (40, 0) to the second key only
    let mut b = Branch {
        w1: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        b1: Tensor::zeros(&[2]),
        w2: Tensor::zeros(&[2, 2]),
        b2: Tensor::zeros(&[2]),
    };
    b.w2 = Tensor::new(vec![2, 2], vec![40.0 / gelu(1.0), 0.0, 0.0, 0.0]).unwrap();
    let layer = InjectorLayer {
        layer: 0,
        k: b,
        v: fresh_layer(1, 2).v,
    };
    let kh = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
    let (k2, v2) = inject_kv(&k, &v, &kh, &Tensor::zeros(&[3, 2]), &layer).unwrap();
    let y = attend_with_memory(&q, &k2, &v2).unwrap();
    assert!((y.data()[0] - 2.0).abs() <= 1e-6);
}

#[test]
fn attention_on_injected_kv_matches_formula_seed10() {
    let layer = InjectorLayer {
        layer: 0,
        k: random_branch(10, 4, 4),
        v: random_branch(100, 4, 4),
    };
    let mut rng = rng_from_seed(101);
    let [q, k, v, kh, vh] = [0; 5].map(|_| Tensor::randn(&[3, 4], 1.0, &mut rng));
    let (k2, v2) = inject_kv(&k, &v, &kh, &vh, &layer).unwrap();
    let y = attend_with_memory(&q, &k2, &v2).unwrap();
    for i in 0..3 {
        let logits: Vec<Real> = (0..3)
            .map(|j| q.row(i).iter().zip(k2.row(j)).map(|(a, b)| a * b).sum::<Real>() / 2.0)
            .collect();
        let z: Real = logits.iter().map(|l| l.exp()).sum();
        for c in 0..4 {
            let want: Real = (0..3).map(|j| logits[j].exp() / z * v2.row(j)[c]).sum();
            assert!((y.row(i)[c] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn only_the_output_layer_learns_at_init() {
    let layer = fresh_layer(30, 4);
    let mut rng = rng_from_seed(31);
    let [q, k, v, kh, vh] = [0; 5].map(|_| Tensor::randn(&[3, 4], 1.0, &mut rng));
    let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let p = bind(&layer, "", &mut tape, |_| true);
    let [q, k, v, kh, vh, w] = [q, k, v, kh, vh, w].map(|t| tape.constant(t));
    let (k2, v2) = p.inject(&mut tape, k, v, kh, vh).unwrap();
    let a = tape.attention(q, k2, v2, 2).unwrap();
    let a = tape.mul(a, w).unwrap();
    let loss = tape.sum(a);
    let g = tape.backward(loss).unwrap();
    for b in [&p.k, &p.v] {
        assert!(g.get_or_zeros(b.w1, &tape).max_abs() == 0.0);
        assert!(g.get_or_zeros(b.b1, &tape).max_abs() == 0.0);
        assert!(g.get_or_zeros(b.w2, &tape).max_abs() > 0.0);
        assert!(g.get_or_zeros(b.b2, &tape).max_abs() > 0.0);
    }
}

#[test]
fn manifest_names_follow_layer_stream_leaf() {
    let mut rng = rng_from_seed(0);
    let mut out = rng_from_seed(1);
    let p = InjectorParams::init(&[2, 0, 2], 4, 4, OutputInit::Zero, &mut rng, &mut out);
    let names: Vec<String> = named_tensors(&p, "injector").into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), 16);
    assert_eq!(names[0], "injector.layer0.K.W1");
    assert_eq!(names[7], "injector.layer0.V.b2");
    assert_eq!(names[8], "injector.layer2.K.W1");
}

#[test]
fn random_output_init_keeps_hidden_layer_bytes() {
    let build = |out: OutputInit| {
        let mut rng = rng_from_seed(5);
        let mut o = rng_from_seed(6);
        InjectorParams::init(&[0], 4, 4, out, &mut rng, &mut o)
    };
    let (z, r) = (build(OutputInit::Zero), build(OutputInit::Random));
    assert_eq!(z.layers[0].k.w1, r.layers[0].k.w1);
    assert_eq!(z.layers[0].v.b1, r.layers[0].v.b1);
    assert!(r.layers[0].k.w2.max_abs() > 0.0);
}
