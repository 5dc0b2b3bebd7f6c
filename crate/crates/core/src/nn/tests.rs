use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn two_layer(seed: u64) -> Network {
    let mut r = rng(seed);
    Network::new(
        "mlp",
        vec![
            Layer::Linear(Linear::new("mlp.fc1", 4, 6, &mut r)),
            Layer::Relu(Relu::new("mlp.relu")),
            Layer::Linear(Linear::new("mlp.fc2", 6, 3, &mut r)),
        ],
    )
    .unwrap()
}

fn strict() -> GradCheckOptions {
    GradCheckOptions::default()
}

#[test]
fn relu_forward() {
    let r = Relu::new("r");
    let y = r.forward_eval(&Tensor::vector(vec![-1.0, 2.0])).unwrap();
    assert_eq!(y.data(), &[0.0, 2.0]);
}

#[test]
fn identity_linear_passes_input_through() {
    let mut fc = Linear::zeros("fc", 3, 3);
    fc.weight_mut().set_value(Tensor::identity(3)).unwrap();
    let x = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng(1));
    assert_eq!(fc.forward_eval(&x).unwrap(), x);
}

#[test]
fn batch_norm_train_output_is_standardized() {
    // wide inputs so that eps/var stays below the 1e-6 tolerance
    let mut bn = BatchNorm::new("bn", 3);
    let x = Tensor::uniform(&[64, 3, 2, 2], -20.0, 20.0, &mut rng(2));
    let y = bn.forward_train(&x).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..64)
            .flat_map(|n| y.data()[(n * 3 + c) * 4..][..4].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

#[test]
fn batch_norm_rejects_single_value_in_train() {
    let mut bn = BatchNorm::new("bn", 2);
    assert!(bn.forward_train(&Tensor::zeros(&[1, 2])).is_err());
    assert!(BatchNorm::with_hyperparameters("bn", 2, 0.0, 0.1).is_err());
}

#[test]
fn mse_cases() {
    let mut r = rng(3);
    let a = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut r);
    assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
    let b = a.map(|v| v - 1.0);
    assert!((mse_loss(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    let c = Tensor::uniform(&[4, 5], -1.0, 1.0, &mut r);
    let mut acc = 0.0;
    for i in 0..20 {
        acc += (a.data()[i] - c.data()[i]).powi(2);
    }
    assert!((mse_loss(&a, &c).unwrap() - acc / 20.0).abs() < 1e-12);
    assert!(mse_loss(&a, &Tensor::zeros(&[5, 4])).is_err());
}

#[test]
fn bias_gradient_of_mse_to_zero_is_two_x_over_n() {
    // zero weights and zero input: output is the bias vector itself
    let mut net = Network::new("p", vec![Layer::Linear(Linear::zeros("p.fc", 2, 5))]).unwrap();
    let bias = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0, 3.0]);
    net.parameters_mut()[1].set_value(bias.clone()).unwrap();
    let out = net.forward(&Tensor::zeros(&[1, 2]), Mode::Train).unwrap();
    let (_, g) = mse_loss_with_grad(&out, &Tensor::zeros(&[1, 5])).unwrap();
    net.backward(&g).unwrap();
    for (got, x) in net.parameters()[1].grad().data().iter().zip(bias.data()) {
        assert!((got - 2.0 * x / 5.0).abs() < 1e-15);
    }
}

#[test]
fn two_layer_gradients_match_finite_differences() {
    let mut net = two_layer(4);
    let x = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng(5));
    let t = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng(6));
    let report = check_gradients(&mut net, &x, &t, &strict()).unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn zero_loss_gives_zero_gradients() {
    let mut net = two_layer(7);
    let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng(8));
    let out = net.forward(&x, Mode::Train).unwrap();
    let (loss, g) = mse_loss_with_grad(&out, &out).unwrap();
    assert_eq!(loss, 0.0);
    net.backward(&g).unwrap();
    for p in net.parameters() {
        assert!(p.grad().data().iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn backward_without_tape_is_rejected() {
    let mut net = two_layer(9);
    let g = Tensor::zeros(&[2, 3]);
    assert!(matches!(net.backward(&g), Err(Error::NoTape(_))));
    net.forward(&Tensor::zeros(&[2, 4]), Mode::Eval).unwrap();
    assert!(matches!(net.backward(&g), Err(Error::NoTape(_))));
}

#[test]
fn shape_errors_name_the_layer() {
    let mut net = two_layer(10);
    let err = net.forward(&Tensor::zeros(&[2, 7]), Mode::Train).unwrap_err();
    assert!(err.to_string().contains("mlp.fc1"), "{err}");
}

#[test]
fn gradients_accumulate_until_cleared() {
    let mut net = two_layer(11);
    let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng(12));
    let t = Tensor::zeros(&[3, 3]);
    let run = |net: &mut Network| {
        let out = net.forward(&x, Mode::Train).unwrap();
        let (_, g) = mse_loss_with_grad(&out, &t).unwrap();
        net.backward(&g).unwrap();
    };
    run(&mut net);
    let once = net.parameters()[0].grad().clone();
    run(&mut net);
    let twice = net.parameters()[0].grad().clone();
    assert!(twice.max_abs_diff(&once.scale(2.0)).unwrap() < 1e-14);
    net.zero_grad();
    assert!(net.parameters()[0].grad().data().iter().all(|&v| v == 0.0));
}

#[test]
fn sgd_single_step() {
    let mut p = Parameter::new("w", Tensor::vector(vec![1.0]));
    p.grad_mut()[0] = 1.0;
    Optimizer::new(OptimizerKind::sgd(0.1, 0.0)).step(&mut [&mut p]).unwrap();
    assert!((p.value().data()[0] - 0.9).abs() < 1e-15);
    assert_eq!(p.grad().data()[0], 0.0);
}

#[test]
fn adam_first_step_moves_by_lr_sign() {
    let mut p = Parameter::new("w", Tensor::vector(vec![1.0, 1.0]));
    p.grad_mut().copy_from_slice(&[0.37, -42.0]);
    Optimizer::new(OptimizerKind::adam(1e-3)).step(&mut [&mut p]).unwrap();
    assert!((p.value().data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
    assert!((p.value().data()[1] - (1.0 + 1e-3)).abs() < 1e-9);
}

#[test]
fn sgd_converges_monotonically_on_quadratic() {
    let mut p = Parameter::new("w", Tensor::vector(vec![0.0]));
    let mut opt = Optimizer::new(OptimizerKind::sgd(0.1, 0.0));
    let mut last = 3.0;
    for _ in 0..10 {
        let w = p.value().data()[0];
        p.grad_mut()[0] = 2.0 * (w - 3.0);
        opt.step(&mut [&mut p]).unwrap();
        let gap = (p.value().data()[0] - 3.0).abs();
        assert!(gap < last);
        last = gap;
    }
}

#[test]
fn optimizer_rejects_parameter_without_state() {
    let mut a = Parameter::new("a", Tensor::vector(vec![1.0]));
    let mut b = Parameter::new("b", Tensor::vector(vec![1.0]));
    let mut opt = Optimizer::new(OptimizerKind::adam(1e-3));
    opt.step(&mut [&mut a]).unwrap();
    assert!(matches!(
        opt.step(&mut [&mut a, &mut b]),
        Err(Error::MissingOptimizerState(name)) if name == "b"
    ));
}

#[test]
fn duplicate_parameter_names_rejected() {
    let mut r = rng(13);
    let layers = vec![
        Layer::Linear(Linear::new("fc", 2, 2, &mut r)),
        Layer::Linear(Linear::new("fc", 2, 2, &mut r)),
    ];
    assert!(Network::new("dup", layers).is_err());
}

fn small_cnn(seed: u64) -> Network {
    let mut r = rng(seed);
    Network::new(
        "cnn",
        vec![
            Layer::Conv2d(Conv2d::new("cnn.conv", 2, 3, 3, 1, 1, &mut r).unwrap()),
            Layer::BatchNorm(BatchNorm::new("cnn.bn", 3)),
            Layer::Relu(Relu::new("cnn.relu")),
            Layer::Residual(ResidualBlock::new("cnn.res", 3, 4, 2, &mut r).unwrap()),
            Layer::AvgPool(AvgPool::new("cnn.pool", 2).unwrap()),
            Layer::Flatten(Flatten::new("cnn.flat")),
            Layer::Linear(Linear::new("cnn.fc", 4, 2, &mut r)),
        ],
    )
    .unwrap()
}

#[test]
fn determinism_of_forward_backward() {
    let x = Tensor::uniform(&[4, 2, 4, 4], -1.0, 1.0, &mut rng(14));
    let t = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng(15));
    let run = || {
        let mut net = small_cnn(16);
        let out = net.forward(&x, Mode::Train).unwrap();
        let (loss, g) = mse_loss_with_grad(&out, &t).unwrap();
        net.backward(&g).unwrap();
        let grads: Vec<Vec<u64>> = net
            .parameters()
            .iter()
            .map(|p| p.grad().data().iter().map(|v| v.to_bits()).collect())
            .collect();
        (loss.to_bits(), grads)
    };
    assert_eq!(run(), run());
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let x = Tensor::uniform(&[19, 2, 4, 4], -1.0, 1.0, &mut rng(17));
    let run = || {
        let mut net = small_cnn(18);
        let out = net.forward(&x, Mode::Train).unwrap();
        net.backward(&out).unwrap();
        net.parameters().iter().map(|p| p.grad().clone()).collect::<Vec<_>>()
    };
    assert_eq!(run(), crate::exec::sequential(run));
}

#[test]
fn eval_is_pure() {
    let mut net = small_cnn(19);
    let x = Tensor::uniform(&[3, 2, 4, 4], -1.0, 1.0, &mut rng(20));
    net.forward(&x, Mode::Train).unwrap();
    net.clear_tape();
    let hash = net.state_hash();
    let a = net.forward(&x, Mode::Eval).unwrap();
    let b = net.forward(&x, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(hash, net.state_hash());
    assert!(net.layers().iter().all(|l| !l.has_tape()));
}

#[test]
fn batch_norm_eval_approaches_train() {
    // stationary N(2, 3²)-like data: running stats converge to batch stats
    let mut bn = BatchNorm::new("bn", 2);
    let mut r = rng(21);
    let mut gaps = Vec::new();
    for step in 1..=60 {
        let x = Tensor::uniform(&[128, 2], -3.0, 7.0, &mut r);
        let train = bn.forward_train(&x).unwrap();
        bn.clear_tape();
        let eval = bn.forward_eval(&x).unwrap();
        if step == 1 || step == 60 {
            let gap = train.sub(&eval).unwrap().map(f64::abs).mean();
            gaps.push(gap);
        }
    }
    assert!(gaps[1] < gaps[0] / 10.0, "{gaps:?}");
}

#[test]
fn conv_output_size_formula() {
    let c = Conv2d::new("c", 1, 1, 3, 2, 1, &mut rng(22)).unwrap();
    assert_eq!(c.output_size(32).unwrap(), 16);
    assert_eq!(c.output_size(1).unwrap(), 1);
    let big = Conv2d::new("c", 1, 1, 5, 1, 0, &mut rng(22)).unwrap();
    assert!(big.output_size(3).is_err());
}

#[test]
fn conv_matches_direct_convolution() {
    let mut r = rng(23);
    let conv = Conv2d::new("c", 2, 3, 3, 2, 1, &mut r).unwrap();
    let x = Tensor::uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut r);
    let y = conv.forward_eval(&x).unwrap();
    assert_eq!(y.shape(), &[2, 3, 3, 3]);
    let w = conv.weight.value().data();
    for n in 0..2 {
        for o in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (ih, iw) = ((i * 2 + ki) as isize - 1, (j * 2 + kj) as isize - 1);
                                if (0..5).contains(&ih) && (0..5).contains(&iw) {
                                    acc += w[((o * 2 + c) * 3 + ki) * 3 + kj]
                                        * x.data()[((n * 2 + c) * 5 + ih as usize) * 5 + iw as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[((n * 3 + o) * 3 + i) * 3 + j];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn avg_pool_rejects_indivisible_input() {
    let p = AvgPool::new("p", 3).unwrap();
    assert!(p.forward_eval(&Tensor::zeros(&[1, 1, 4, 4])).is_err());
}

#[test]
fn cross_entropy_uniform_logits_is_ln_k() {
    let logits = Tensor::zeros(&[4, 10]);
    let (loss, g) = softmax_cross_entropy(&logits, &[0, 3, 9, 5]).unwrap();
    assert!((loss - 10f64.ln()).abs() < 1e-12);
    let row_sums: Vec<f64> = g.data().chunks(10).map(|r| r.iter().sum()).collect();
    assert!(row_sums.iter().all(|s| s.abs() < 1e-15));
    assert!(matches!(
        softmax_cross_entropy(&logits, &[0, 10, 1, 2]),
        Err(Error::LabelOutOfRange { index: 1, label: 10, .. })
    ));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut r = rng(24);
    let logits = Tensor::uniform(&[3, 5], -2.0, 2.0, &mut r);
    let labels = [4, 0, 2];
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    for i in 0..15 {
        let mut p = logits.clone();
        p.data_mut()[i] += 1e-5;
        let mut m = logits.clone();
        m.data_mut()[i] -= 1e-5;
        let num = (softmax_cross_entropy(&p, &labels).unwrap().0
            - softmax_cross_entropy(&m, &labels).unwrap().0)
            / 2e-5;
        assert!((num - g.data()[i]).abs() < 1e-8);
    }
}

fn check_layer(layer: Layer, input_shape: &[usize], seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut net = Network::new("g", vec![layer]).unwrap();
    let x = Tensor::uniform(input_shape, -1.0, 1.0, &mut r);
    let out = net.forward_eval(&x).unwrap();
    let t = Tensor::uniform(out.shape(), -1.0, 1.0, &mut r);
    check_gradients(&mut net, &x, &t, &strict()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn linear_gradients(b in 1usize..5, i in 1usize..6, o in 1usize..6, seed in 0u64..1000) {
        let l = Layer::Linear(Linear::new("fc", i, o, &mut rng(seed)));
        let rep = check_layer(l, &[b, i], seed + 1);
        prop_assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn conv_gradients(
        c in 1usize..3, o in 1usize..4, k in 1usize..4, s in 1usize..3, p in 0usize..2,
        hw in 3usize..6, seed in 0u64..1000,
    ) {
        let l = Layer::Conv2d(Conv2d::new("conv", c, o, k, s, p, &mut rng(seed)).unwrap());
        let rep = check_layer(l, &[2, c, hw, hw + 1], seed + 1);
        prop_assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn batch_norm_gradients(b in 2usize..6, c in 1usize..4, spatial in prop::bool::ANY, seed in 0u64..1000) {
        let shape = if spatial { vec![b, c, 2, 3] } else { vec![b, c] };
        let rep = check_layer(Layer::BatchNorm(BatchNorm::new("bn", c)), &shape, seed);
        prop_assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn relu_gradients(n in 1usize..20, seed in 0u64..1000) {
        let rep = check_layer(Layer::Relu(Relu::new("relu")), &[2, n], seed);
        prop_assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn avg_pool_gradients(k in 1usize..4, c in 1usize..3, seed in 0u64..1000) {
        let l = Layer::AvgPool(AvgPool::new("pool", k).unwrap());
        let rep = check_layer(l, &[2, c, 2 * k, 3 * k], seed);
        prop_assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn flatten_gradients(c in 1usize..4, h in 1usize..4, seed in 0u64..1000) {
        let rep = check_layer(Layer::Flatten(Flatten::new("flat")), &[2, c, h, 2], seed);
        prop_assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn residual_gradients(c in 1usize..3, o in 1usize..4, s in 1usize..3, seed in 0u64..1000) {
        let l = Layer::Residual(ResidualBlock::new("res", c, o, s, &mut rng(seed)).unwrap());
        let rep = check_layer(l, &[3, c, 4, 4], seed + 1);
        prop_assert!(rep.passed(), "{:?}", rep.failures);
    }
}
