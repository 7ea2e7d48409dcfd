use advst::autodiff::{Graph, Tensor};
use advst::classifier::{Architecture, ModelParams};
use advst::data::{ShiftOp, ShiftSpec};
use advst::transforms::{clamp_params, transform_images, BaseOpKind, ChainDistribution, TransformChain, TransformParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, n: usize) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3, 32, 32], |_| rng.gen_range(0.0..=1.0))
}

fn learnable() -> Vec<BaseOpKind> {
    BaseOpKind::ALL.iter().copied().filter(|k| k.is_learnable()).collect()
}

fn grad_of(x: &Tensor<f64>, f: impl Fn(&Graph<f64>, advst::autodiff::Var) -> advst::autodiff::Var) -> Vec<f64> {
    let g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&g, v);
    let mut grads = g.backward(out).unwrap();
    grads.take(v).unwrap().into_data()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_is_linear_in_the_output(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = image(seed, 1).reshaped(&[3, 1024]).unwrap();
        let f = |g: &Graph<f64>, v| g.sum(g.exp(g.scale(v, 0.5)));
        let h = |g: &Graph<f64>, v| g.sum(g.mul(g.log_softmax(v), g.sin(v)).unwrap());
        let gf = grad_of(&x, f);
        let gh = grad_of(&x, h);
        let gc = grad_of(&x, |g, v| {
            let (fv, hv) = (f(g, v), h(g, v));
            g.add(g.scale(fv, a), g.scale(hv, b)).unwrap()
        });
        for i in 0..gc.len() {
            prop_assert!((gc[i] - (a * gf[i] + b * gh[i])).abs() < 1e-9 * (1.0 + gc[i].abs()));
        }
    }

    #[test]
    fn straight_through_passes_gradient_unchanged(seed in 0u64..1000) {
        let x = image(seed, 1);
        let w = image(seed + 1, 1);
        let got = grad_of(&x, |g, v| {
            let rounded = Tensor::from_fn(&[1, 3, 32, 32], |i| (x.data()[i] * 4.0).round() / 4.0);
            let st = g.straight_through(v, rounded).unwrap();
            g.sum(g.mul(st, g.constant(w.clone())).unwrap())
        });
        prop_assert_eq!(got, w.data().to_vec());
    }

    #[test]
    fn clamp_params_is_idempotent_and_valid(seed in 0u64..10_000, spread in 0.0f64..5.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = ChainDistribution::default().sample_chain(&mut rng);
        let base = TransformParams::init(&chain, &mut rng);
        let wild: Vec<f64> = base.values().iter().map(|v| v + rng.gen_range(-spread..=spread)).collect();
        let once = clamp_params(&chain, &base.with_values(wild));
        prop_assert!(once.is_valid(&chain));
        prop_assert_eq!(clamp_params(&chain, &once), once);
    }

    #[test]
    fn chains_keep_images_in_unit_range(seed in 0u64..10_000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = ChainDistribution::default().sample_chain(&mut rng);
        let params = TransformParams::init(&chain, &mut rng);
        // push parameters anywhere inside their intervals, not just near neutral
        let specs: Vec<_> = chain.ops().iter().flat_map(|k| k.param_specs().iter().copied()).collect();
        let values: Vec<f64> = specs.iter().map(|s| rng.gen_range(s.lo..=s.hi)).collect();
        let params = params.with_values(values);
        let out = transform_images(&chain, &params, &image(seed, 2)).unwrap();
        prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)), "chain {}", chain);
    }

    #[test]
    fn neutral_chains_are_identity(seed in 0u64..10_000, len in 1usize..=4) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ops = learnable();
        ops.shuffle(&mut rng);
        ops.truncate(len);
        let chain = TransformChain::new(ops).unwrap();
        let x = image(seed, 1);
        let out = transform_images(&chain, &TransformParams::neutral(&chain), &x).unwrap();
        prop_assert!(out.max_abs_diff(&x) < 1e-5, "chain {}: {}", chain, out.max_abs_diff(&x));
    }

    #[test]
    fn shift_specs_print_and_parse_back(ops in proptest::collection::vec(0usize..5, 0..4), a in -0.3f64..0.3, s in 0.5f64..2.0) {
        let ops: Vec<ShiftOp> = ops
            .into_iter()
            .map(|k| match k {
                0 => ShiftOp::Invert,
                1 => ShiftOp::Translate(a, -a / 2.0),
                2 => ShiftOp::Scale(s),
                3 => ShiftOp::Colorize { background: (a + 0.3) / 0.6, foreground: 0.25 },
                _ => ShiftOp::Contrast(s),
            })
            .collect();
        let spec = ShiftSpec::new(ops).unwrap();
        let parsed: ShiftSpec = spec.to_string().parse().unwrap();
        prop_assert_eq!(parsed, spec);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in 0u64..1000) {
        let arch = Architecture { classes: 4, conv1: 2, conv2: 3, hidden: 5, projection: 2 };
        let model = ModelParams::<f32>::init(arch, seed).unwrap();
        let bytes = model.to_bytes();
        let back = ModelParams::<f32>::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, model);
    }
}

#[test]
fn unused_inputs_get_zero_gradient() {
    let g = Graph::new();
    let used = g.param(Tensor::from_vec(vec![1.0, 2.0]));
    let unused = g.param(Tensor::from_vec(vec![3.0, 4.0, 5.0]));
    let out = g.sum(g.mul(used, used).unwrap());
    let grads = g.backward(out).unwrap();
    assert_eq!(grads.wrt(used).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn every_learnable_op_is_identity_at_neutral() {
    let x = image(3, 2);
    for kind in learnable() {
        let chain = TransformChain::new(vec![kind]).unwrap();
        let out = transform_images(&chain, &TransformParams::neutral(&chain), &x).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-5, "{kind}: {}", out.max_abs_diff(&x));
    }
}
