use super::*;
use alloc::vec;
use proptest::prelude::*;
use rand::Rng;

fn tiny_conv() -> ModelArch {
    let relu = Activation::Relu;
    ModelArch {
        input: Shape::new(2, 6, 6),
        layers: vec![
            LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, padding: 1, activation: relu },
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Conv2d { in_channels: 3, out_channels: 2, kernel: 2, stride: 1, padding: 0, activation: relu },
            LayerSpec::Dense { inputs: 8, outputs: 5, activation: relu },
            LayerSpec::Dense { inputs: 5, outputs: 3, activation: Activation::Identity },
        ],
        classes: 3,
    }
}

fn tiny_mlp() -> ModelArch {
    ModelArch::desk_mlp(Shape::new(1, 3, 3), 6, 4)
}

/// Smallest distance of any ReLU pre-activation from zero and of any pool
/// winner from its runner-up; finite differences are only meaningful when
/// this is well above the step size.
fn kink_margin(net: &Network, params: &[f64], x: &[f64]) -> f64 {
    let trace = net.forward_trace(params, x).unwrap();
    let mut margin = f64::INFINITY;
    for (idx, (spec, lay)) in net.arch().layers.iter().zip(net.layout()).enumerate() {
        match *spec {
            LayerSpec::Dense { activation: Activation::Relu, .. } | LayerSpec::Conv2d { activation: Activation::Relu, .. } => {
                for &z in &trace.pre[idx] {
                    margin = margin.min(z.abs());
                }
            }
            LayerSpec::MaxPool2d { size } => {
                let input = &trace.acts[idx];
                let (ih, iw) = (lay.input.height, lay.input.width);
                for c in 0..lay.input.channels {
                    for oy in 0..lay.output.height {
                        for ox in 0..lay.output.width {
                            let mut vals = vec![];
                            for dy in 0..size {
                                for dx in 0..size {
                                    vals.push(input[(c * ih + oy * size + dy) * iw + ox * size + dx]);
                                }
                            }
                            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                            // Ties among dead ReLU outputs carry zero gradient either way.
                            if vals[0] > 0.0 {
                                margin = margin.min(vals[0] - vals[1]);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}

fn random_input(net: &Network, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[99]);
    (0..net.feature_len()).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let tol = 1e-6 + 1e-3 * analytic.abs().max(numeric.abs());
    assert!((analytic - numeric).abs() <= tol, "{what}: analytic {analytic} vs numeric {numeric}");
}

fn check_fd(arch: &ModelArch, seed: u64, label: usize) -> Result<(), TestCaseError> {
    let params = init_model(arch, seed).unwrap();
    let net = params.network().clone();
    let x = random_input(&net, seed);
    prop_assume!(kink_margin(&net, params.values(), &x) > 2e-3);
    let g = net.sample_gradient(params.values(), &x, Target::Class(label)).unwrap();
    let h = 1e-4;
    let loss_at = |p: &[f64], x: &[f64]| net.sample_gradient(p, x, Target::Class(label)).unwrap().loss;
    let mut p = params.values().to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss_at(&p, &x);
        p[i] = orig - h;
        let down = loss_at(&p, &x);
        p[i] = orig;
        assert_close(g.params[i], (up - down) / (2.0 * h), "param");
    }
    let mut xv = x.clone();
    for i in 0..xv.len() {
        let orig = xv[i];
        xv[i] = orig + h;
        let up = loss_at(params.values(), &xv);
        xv[i] = orig - h;
        let down = loss_at(params.values(), &xv);
        xv[i] = orig;
        assert_close(g.input[i], (up - down) / (2.0 * h), "input");
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn mlp_gradients_match_finite_differences(seed in 0u64..10_000, label in 0usize..4) {
        check_fd(&tiny_mlp(), seed, label)?;
    }

    #[test]
    fn conv_gradients_match_finite_differences(seed in 0u64..10_000, label in 0usize..3) {
        check_fd(&tiny_conv(), seed, label)?;
    }

    #[test]
    fn per_sample_mean_equals_batch_gradient(seed in 0u64..10_000, n in 1usize..6) {
        let params = init_model(&tiny_conv(), seed).unwrap();
        let net = params.network().clone();
        let mut inputs = vec![];
        let mut labels = vec![];
        for i in 0..n {
            inputs.extend(random_input(&net, seed * 31 + i as u64));
            labels.push(i % 3);
        }
        let batch = Batch::new(inputs, labels, net.feature_len()).unwrap();
        let (l1, per) = loss_and_per_sample_gradients(&params, &batch).unwrap();
        let (l2, full) = batch_gradient(&params, &batch).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-10);
        for j in 0..full.len() {
            let mean: f64 = per.iter().map(|g| g[j]).sum::<f64>() / n as f64;
            prop_assert!((mean - full[j]).abs() <= 1e-10);
        }
    }

    #[test]
    fn gradients_are_deterministic(seed in 0u64..10_000) {
        let a = init_model(&tiny_mlp(), seed).unwrap();
        let b = init_model(&tiny_mlp(), seed).unwrap();
        prop_assert_eq!(a.values(), b.values());
        let batch = Batch::new(random_input(a.network(), seed), vec![1], 9).unwrap();
        prop_assert_eq!(batch_gradient(&a, &batch).unwrap(), batch_gradient(&b, &batch).unwrap());
    }
}

#[test]
fn soft_target_gradient_matches_finite_differences() {
    let params = init_model(&tiny_mlp(), 3).unwrap();
    let net = params.network().clone();
    let x = random_input(&net, 3);
    let t = [0.1, 0.2, 0.3, 0.4];
    let g = net.sample_gradient(params.values(), &x, Target::Soft(&t)).unwrap();
    let h = 1e-5;
    let mut xv = x.clone();
    for i in 0..xv.len() {
        let orig = xv[i];
        xv[i] = orig + h;
        let up = net.sample_gradient(params.values(), &xv, Target::Soft(&t)).unwrap().loss;
        xv[i] = orig - h;
        let down = net.sample_gradient(params.values(), &xv, Target::Soft(&t)).unwrap().loss;
        xv[i] = orig;
        assert_close(g.input[i], (up - down) / (2.0 * h), "soft input");
    }
}

#[test]
fn init_is_deterministic_and_bounded() {
    let arch = ModelArch::desk_default();
    let a = init_model(&arch, 11).unwrap();
    assert_eq!(a, init_model(&arch, 11).unwrap());
    assert_ne!(a.values(), init_model(&arch, 12).unwrap().values());
    assert_eq!(a.len(), 64 * 32 + 32 + 32 * 10 + 10);
    let bound = 1.0 / 8.0;
    assert!(a.values()[..64 * 32 + 32].iter().all(|v| v.abs() <= bound));
}

#[test]
fn single_dense_layer_has_ten_parameters() {
    let arch = ModelArch {
        input: Shape::new(1, 1, 4),
        layers: vec![LayerSpec::Dense { inputs: 4, outputs: 2, activation: Activation::Identity }],
        classes: 2,
    };
    assert_eq!(init_model(&arch, 0).unwrap().len(), 10);
}

#[test]
fn init_rejects_invalid_arch() {
    let mut arch = ModelArch::desk_default();
    arch.layers[0] = LayerSpec::Dense { inputs: 63, outputs: 32, activation: Activation::Relu };
    assert!(matches!(init_model(&arch, 0), Err(ModelError::InvalidArch { layer: 0, .. })));
}

#[test]
fn lenet5_initializes_with_reference_count() {
    assert_eq!(init_model(&ModelArch::lenet5(), 0).unwrap().len(), 83_126);
}

#[test]
fn single_sample_batch_matches_its_per_sample_gradient() {
    let params = init_model(&tiny_mlp(), 5).unwrap();
    let batch = Batch::new(random_input(params.network(), 5), vec![2], 9).unwrap();
    let (_, per) = loss_and_per_sample_gradients(&params, &batch).unwrap();
    let (_, full) = batch_gradient(&params, &batch).unwrap();
    assert_eq!(per.len(), 1);
    assert_eq!(per[0], full);
}

#[test]
fn duplicated_sample_gives_identical_gradients() {
    let params = init_model(&tiny_mlp(), 6).unwrap();
    let x = random_input(params.network(), 6);
    let mut inputs = x.clone();
    inputs.extend(&x);
    let batch = Batch::new(inputs, vec![3, 3], 9).unwrap();
    let (_, per) = loss_and_per_sample_gradients(&params, &batch).unwrap();
    assert_eq!(per[0], per[1]);
}

#[test]
fn empty_batch_and_bad_labels_are_rejected() {
    let params = init_model(&tiny_mlp(), 0).unwrap();
    let empty = Batch::new(vec![], vec![], 9).unwrap();
    assert_eq!(loss_and_per_sample_gradients(&params, &empty).unwrap_err(), ModelError::EmptyBatch);
    let bad = Batch::new(vec![0.0; 9], vec![4], 9).unwrap();
    assert!(matches!(batch_gradient(&params, &bad), Err(ModelError::LabelOutOfRange { label: 4, classes: 4 })));
    assert!(Batch::new(vec![0.0; 8], vec![0], 9).is_err());
}

#[test]
fn non_finite_activation_names_the_layer() {
    let params = init_model(&tiny_mlp(), 0).unwrap();
    let mut x = vec![0.0; 9];
    x[0] = f64::INFINITY;
    let err = params.network().sample_gradient(params.values(), &x, Target::Class(0)).unwrap_err();
    assert_eq!(err, ModelError::NonFinite { layer: 0 });
}

#[test]
fn apply_step_examples() {
    let arch = ModelArch {
        input: Shape::new(1, 1, 1),
        layers: vec![LayerSpec::Dense { inputs: 1, outputs: 1, activation: Activation::Identity }],
        classes: 1,
    };
    let base = init_model(&arch, 0).unwrap();
    let p = base.with_values(vec![1.0, 2.0]).unwrap();
    let stepped = apply_step(&p, &[1.0, -2.0], 0.1).unwrap();
    assert_eq!(stepped.values(), &[0.9, 2.2]);
    assert_eq!(apply_step(&p, &[5.0, 7.0], 0.0).unwrap(), p);
    assert!(apply_step(&p, &[1.0], 0.1).is_err());
}

proptest! {
    #[test]
    fn apply_step_inverse_is_exact(
        vals in proptest::collection::vec(-4.0f64..4.0, 2),
        upd in proptest::collection::vec(-4.0f64..4.0, 2),
        k in -8i32..8,
    ) {
        // Power-of-two rates with bounded magnitudes keep both products exact.
        let lr = libm::ldexp(1.0, k);
        let vals: Vec<f64> = vals.iter().map(|v| libm::round(v * 1024.0) / 1024.0).collect();
        let upd: Vec<f64> = upd.iter().map(|v| libm::round(v * 1024.0) / 1024.0).collect();
        let arch = ModelArch {
            input: Shape::new(1, 1, 1),
            layers: vec![LayerSpec::Dense { inputs: 1, outputs: 1, activation: Activation::Identity }],
            classes: 1,
        };
        let p = init_model(&arch, 0).unwrap().with_values(vals).unwrap();
        let back = apply_step(&apply_step(&p, &upd, lr).unwrap(), &upd, -lr).unwrap();
        prop_assert_eq!(back, p);
    }
}

#[test]
fn accuracy_counts_argmax_hits() {
    let arch = ModelArch {
        input: Shape::new(1, 1, 2),
        layers: vec![LayerSpec::Dense { inputs: 2, outputs: 2, activation: Activation::Identity }],
        classes: 2,
    };
    let p = init_model(&arch, 0).unwrap().with_values(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let acc = accuracy(&p, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], &[0, 1, 1]).unwrap();
    assert!((acc - 2.0 / 3.0).abs() < 1e-15);
}
