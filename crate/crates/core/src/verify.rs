//! Self-check suites: transform correctness and gradient agreement.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dft::{dft_forward, dft_inverse, make_targets, DftDims, Formulation, TargetSpec};
use crate::error::Result;
use crate::models::{DecoderConfig, EncoderConfig, HeadConfig, Model, SequentialChainConfig};
use crate::nn::{
    check_gradients, AvgPool, BatchNorm, Conv2d, Flatten, GradCheckOptions, GradCheckReport, Layer, LayerKind,
    Linear, Network, Relu, ResidualBlock,
};
use crate::tensor::{ComplexTensor, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub max_error: f64,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {} (max error {:.3e}){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            if self.detail.is_empty() { String::new() } else { format!(": {}", self.detail) }
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn extend(&mut self, other: SuiteReport) {
        self.checks.extend(other.checks);
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Direct evaluation of the multidimensional DFT sum over the last `dims`
/// axes, without any factorization.
pub fn naive_dft(x: &Tensor, dims: DftDims) -> ComplexTensor {
    let shape = x.shape();
    let d = dims.count();
    let axes = &shape[shape.len() - d..];
    let block: usize = axes.iter().product();
    let tables: Vec<Vec<(f64, f64)>> = axes
        .iter()
        .map(|&n| {
            (0..n)
                .map(|j| {
                    let a = -2.0 * std::f64::consts::PI * j as f64 / n as f64;
                    (a.cos(), a.sin())
                })
                .collect()
        })
        .collect();
    let coords: Vec<[usize; 3]> = (0..block)
        .map(|mut i| {
            let mut idx = [0; 3];
            for a in (0..d).rev() {
                idx[a] = i % axes[a];
                i /= axes[a];
            }
            idx
        })
        .collect();
    let mut re = vec![0.0; x.numel()];
    let mut im = vec![0.0; x.numel()];
    for (b, chunk) in x.data().chunks(block).enumerate() {
        for k in 0..block {
            let kk = coords[k];
            let (mut sr, mut si) = (0.0, 0.0);
            for (n, &v) in chunk.iter().enumerate() {
                let nn = coords[n];
                let (mut wr, mut wi) = (1.0, 0.0);
                for a in 0..d {
                    let (tr, ti) = tables[a][(kk[a] * nn[a]) % axes[a]];
                    (wr, wi) = (wr * tr - wi * ti, wr * ti + wi * tr);
                }
                sr += v * wr;
                si += v * wi;
            }
            re[b * block + k] = sr;
            im[b * block + k] = si;
        }
    }
    ComplexTensor::new(
        Tensor::new(shape.to_vec(), re).expect("same shape"),
        Tensor::new(shape.to_vec(), im).expect("same shape"),
    )
    .expect("same shape")
}

pub type Transform<'a> = &'a dyn Fn(&Tensor, DftDims) -> Result<ComplexTensor>;

pub struct DftSuiteOptions {
    pub cases_per_dims: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for DftSuiteOptions {
    fn default() -> Self {
        DftSuiteOptions {
            cases_per_dims: 100,
            seed: 0,
            tolerance: 1e-9,
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, case: usize) -> Vec<usize> {
    // every fourth case is the full 3×32×32 extent
    if case % 4 == 0 {
        vec![3, 32, 32]
    } else {
        vec![rng.random_range(1..=3), rng.random_range(1..=32), rng.random_range(1..=32)]
    }
}

fn complex_max_diff(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
    let re = a.re().max_abs_diff(b.re()).unwrap_or(f64::INFINITY);
    let im = a.im().max_abs_diff(b.im()).unwrap_or(f64::INFINITY);
    re.max(im)
}

/// Oracle equivalence of `transform` against [`naive_dft`].
pub fn oracle_check(transform: Transform<'_>, opts: &DftSuiteOptions) -> SuiteReport {
    let mut report = SuiteReport::default();
    for dims in [DftDims::One, DftDims::Two, DftDims::Three] {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ dims.count() as u64);
        let mut worst: f64 = 0.0;
        let mut detail = String::new();
        for case in 0..opts.cases_per_dims {
            let shape = random_shape(&mut rng, case);
            let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
            let err = match transform(&x, dims) {
                Ok(fast) => complex_max_diff(&fast, &naive_dft(&x, dims)),
                Err(e) => {
                    detail = format!("case {case} {shape:?}: {e}");
                    f64::INFINITY
                }
            };
            if err > worst {
                worst = err;
                if detail.is_empty() || err.is_infinite() {
                    detail = format!("worst case {case} shape {shape:?}");
                }
            }
        }
        let passed = worst < opts.tolerance;
        report.checks.push(CheckResult {
            name: format!("oracle equivalence, {}D, {} tensors", dims.count(), opts.cases_per_dims),
            passed,
            max_error: worst,
            detail: if passed { String::new() } else { detail },
        });
    }
    report
}

/// Parseval's identity and forward/inverse round trip on `3×32×32` tensors.
pub fn parseval_round_trip_check(transform: Transform<'_>, opts: &DftSuiteOptions) -> SuiteReport {
    let mut report = SuiteReport::default();
    for dims in [DftDims::One, DftDims::Two, DftDims::Three] {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(100 + dims.count() as u64));
        let (mut parseval, mut round): (f64, f64) = (0.0, 0.0);
        for _ in 0..opts.cases_per_dims {
            let x = Tensor::uniform(&[3, 32, 32], -1.0, 1.0, &mut rng);
            let n: usize = x.shape()[3 - dims.count()..].iter().product();
            let Ok(spec) = transform(&x, dims) else {
                parseval = f64::INFINITY;
                round = f64::INFINITY;
                continue;
            };
            let energy_x: f64 = x.data().iter().map(|v| v * v).sum();
            let energy_f: f64 = spec
                .re()
                .data()
                .iter()
                .zip(spec.im().data())
                .map(|(r, i)| r * r + i * i)
                .sum::<f64>()
                / n as f64;
            parseval = parseval.max((energy_x - energy_f).abs() / energy_x);
            let back = match dft_inverse(&spec, dims) {
                Ok(b) => b,
                Err(_) => {
                    round = f64::INFINITY;
                    continue;
                }
            };
            let scale = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err_re = back.re().max_abs_diff(&x).unwrap_or(f64::INFINITY);
            let err_im = back.im().data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            round = round.max(err_re.max(err_im) / scale);
        }
        for (what, err) in [("Parseval", parseval), ("round trip", round)] {
            report.checks.push(CheckResult {
                name: format!("{what}, {}D, {} tensors", dims.count(), opts.cases_per_dims),
                passed: err < opts.tolerance,
                max_error: err,
                detail: String::new(),
            });
        }
    }
    report
}

/// The full transform suite against an arbitrary forward transform.
pub fn dft_suite_with(transform: Transform<'_>, opts: &DftSuiteOptions) -> SuiteReport {
    let mut r = oracle_check(transform, opts);
    r.extend(parseval_round_trip_check(transform, opts));
    r
}

pub fn dft_suite(opts: &DftSuiteOptions) -> SuiteReport {
    dft_suite_with(&dft_forward, opts)
}

fn grad_result(name: String, r: GradCheckReport) -> CheckResult {
    CheckResult {
        passed: r.passed(),
        max_error: r.max_rel_error,
        detail: if r.passed() {
            format!("{} entries", r.checked)
        } else {
            r.failures.iter().take(3).cloned().collect::<Vec<_>>().join("; ")
        },
        name,
    }
}

/// One single-layer network per kind, with a matching input shape.
pub fn layer_cases(seed: u64) -> Result<Vec<(LayerKind, Network, Vec<usize>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let cases = vec![
        (Layer::Linear(Linear::new("fc", 5, 4, r)), vec![3, 5]),
        (Layer::Conv2d(Conv2d::new("conv", 2, 3, 3, 2, 1, r)?), vec![2, 2, 5, 5]),
        (Layer::BatchNorm(BatchNorm::new("bn", 3)), vec![4, 3, 2, 2]),
        (Layer::Relu(Relu::new("relu")), vec![3, 7]),
        (Layer::AvgPool(AvgPool::new("pool", 2)?), vec![2, 2, 4, 6]),
        (Layer::Flatten(Flatten::new("flat")), vec![2, 3, 2, 2]),
        (Layer::Residual(ResidualBlock::new("res", 2, 3, 2, r)?), vec![3, 2, 4, 4]),
    ];
    cases
        .into_iter()
        .map(|(layer, shape)| Ok((layer.kind(), Network::new("case", vec![layer])?, shape)))
        .collect()
}

/// Gradient agreement for a full pretraining loss: encoder, head and
/// DFT targets computed from the batch.
pub fn model_gradient_check(
    model: &mut Model,
    images: &Tensor,
    targets: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    model.zero_grad();
    model.train_step(images, targets)?;
    let analytic: Vec<(String, Tensor)> = model
        .trainable_parameters_mut()
        .into_iter()
        .map(|p| (p.name().to_string(), p.grad().clone()))
        .collect();
    model.zero_grad();
    let mut report = GradCheckReport::default();
    let loss = |model: &mut Model| -> Result<f64> {
        let l = model.train_step(images, targets)?.iter().sum();
        model.zero_grad();
        Ok(l)
    };
    for (p, (name, grad)) in analytic.iter().enumerate() {
        let n = grad.numel();
        let picks: Vec<usize> = if n <= opts.max_entries_per_tensor {
            (0..n).collect()
        } else {
            (0..opts.max_entries_per_tensor).map(|i| i * n / opts.max_entries_per_tensor).collect()
        };
        for i in picks {
            let orig = model.trainable_parameters_mut()[p].value().data()[i];
            model.trainable_parameters_mut()[p].value_mut()[i] = orig + opts.step;
            let plus = loss(model)?;
            model.trainable_parameters_mut()[p].value_mut()[i] = orig - opts.step;
            let minus = loss(model)?;
            model.trainable_parameters_mut()[p].value_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            report.record(format!("{name}[{i}]"), grad.data()[i], numeric, opts);
        }
    }
    Ok(report)
}

/// Finite-difference checks for every layer kind plus complete DFT-target
/// losses for a plain decoder and a sequential chain.
pub fn grad_suite(seed: u64) -> Result<SuiteReport> {
    let opts = GradCheckOptions::default();
    let mut report = SuiteReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
    for (kind, mut net, shape) in layer_cases(seed)? {
        let x = Tensor::uniform(&shape, -1.0, 1.0, &mut rng);
        let out = net.forward_eval(&x)?;
        let t = Tensor::uniform(out.shape(), -1.0, 1.0, &mut rng);
        let r = check_gradients(&mut net, &x, &t, &opts)?;
        report.checks.push(grad_result(format!("gradient, {kind:?}"), r));
    }

    let enc = EncoderConfig {
        widths: vec![2, 3],
        embedding_dim: 4,
        ..EncoderConfig::compact([2, 4, 4])
    };
    let x = Tensor::uniform(&[3, 2, 4, 4], 0.0, 1.0, &mut rng);
    let spec2 = TargetSpec::new(DftDims::Two, Formulation::Magnitude);
    let len = spec2.target_len(&enc.image_shape)?;
    let sampled = GradCheckOptions {
        max_entries_per_tensor: 12,
        ..opts.clone()
    };

    let head = HeadConfig::Decoder(DecoderConfig::new(4, len).with_hidden([6, 6, 6]));
    let mut model = Model::build(&enc, &head, &mut rng)?;
    let targets = vec![make_targets(&x, &spec2)?];
    let r = model_gradient_check(&mut model, &x, &targets, &sampled)?;
    report.checks.push(grad_result("gradient, full 2D magnitude target loss".into(), r));

    let spec1 = TargetSpec::new(DftDims::One, Formulation::Magnitude);
    let chain = SequentialChainConfig::new(4, 48, vec![(spec1, len), (spec2, len)]);
    let mut model = Model::build(&enc, &HeadConfig::Chain(chain), &mut rng)?;
    let targets = vec![make_targets(&x, &spec1)?, make_targets(&x, &spec2)?];
    let r = model_gradient_check(&mut model, &x, &targets, &sampled)?;
    report.checks.push(grad_result("gradient, sequential 1D→2D chain loss".into(), r));
    Ok(report)
}
