//! Central finite-difference checks of analytic gradients.

use super::{mse_loss_with_grad, Mode, Network};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    /// Differences below this pass regardless of relative error.
    pub abs_floor: f64,
    /// Entries probed per tensor; larger tensors are sampled at even strides.
    pub max_entries_per_tensor: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
            max_entries_per_tensor: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: String,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn record(&mut self, what: String, analytic: f64, numeric: f64, opts: &GradCheckOptions) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        self.max_abs_error = self.max_abs_error.max(diff);
        if diff <= opts.abs_floor {
            return;
        }
        let rel = diff / analytic.abs().max(numeric.abs());
        if rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = what.clone();
        }
        if rel > opts.rel_tol {
            self.failures
                .push(format!("{what}: analytic {analytic:e} vs numeric {numeric:e} (rel {rel:.3e})"));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.failures.extend(other.failures);
    }
}

fn probe_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let stride = n as f64 / max as f64;
        (0..max).map(|i| (i as f64 * stride) as usize).collect()
    }
}

/// Compares the gradients a closure accumulates against central differences
/// of the same closure's loss.
///
/// `loss(nets, backward)` must run a train-mode forward and return the
/// scalar loss; when `backward` is true it must also back-propagate into
/// the networks' parameter gradients.
pub fn finite_difference_check<F>(
    nets: &mut [&mut Network],
    mut loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut [&mut Network], bool) -> Result<f64>,
{
    nets.iter_mut().for_each(|n| n.zero_grad());
    loss(nets, true)?;
    let analytic: Vec<Vec<Tensor>> = nets
        .iter()
        .map(|n| n.parameters().iter().map(|p| p.grad().clone()).collect())
        .collect();
    let mut report = GradCheckReport::default();
    for net_idx in 0..nets.len() {
        let param_count = nets[net_idx].parameters().len();
        for p_idx in 0..param_count {
            let (name, numel) = {
                let p = &nets[net_idx].parameters()[p_idx];
                (p.name().to_string(), p.numel())
            };
            for i in probe_indices(numel, opts.max_entries_per_tensor) {
                let original = nets[net_idx].parameters()[p_idx].value().data()[i];
                let set = |nets: &mut [&mut Network], v: f64| {
                    nets[net_idx].parameters_mut()[p_idx].value_mut()[i] = v;
                };
                set(nets, original + opts.step);
                let plus = loss(nets, false)?;
                set(nets, original - opts.step);
                let minus = loss(nets, false)?;
                set(nets, original);
                let numeric = (plus - minus) / (2.0 * opts.step);
                report.record(
                    format!("{name}[{i}]"),
                    analytic[net_idx][p_idx].data()[i],
                    numeric,
                    opts,
                );
            }
        }
    }
    nets.iter_mut().for_each(|n| {
        n.zero_grad();
        n.clear_tape();
    });
    Ok(report)
}

/// Checks parameter and input gradients of `mse(net(input), target)`.
pub fn check_gradients(
    net: &mut Network,
    input: &Tensor,
    target: &Tensor,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut report = finite_difference_check(
        &mut [net],
        |nets, backward| {
            let out = nets[0].forward(input, Mode::Train)?;
            let (l, g) = mse_loss_with_grad(&out, target)?;
            if backward {
                nets[0].backward(&g)?;
            }
            Ok(l)
        },
        opts,
    )?;

    let out = net.forward(input, Mode::Train)?;
    let (_, g) = mse_loss_with_grad(&out, target)?;
    let dx = net.backward(&g)?;
    net.zero_grad();
    let mut x = input.clone();
    let mut eval = |x: &Tensor| -> Result<f64> {
        let out = net.forward(x, Mode::Train)?;
        super::mse_loss(&out, target)
    };
    for i in probe_indices(x.numel(), opts.max_entries_per_tensor) {
        let original = x.data()[i];
        x.data_mut()[i] = original + opts.step;
        let plus = eval(&x)?;
        x.data_mut()[i] = original - opts.step;
        let minus = eval(&x)?;
        x.data_mut()[i] = original;
        report.record(
            format!("input[{i}]"),
            dx.data()[i],
            (plus - minus) / (2.0 * opts.step),
            opts,
        );
    }
    net.clear_tape();
    Ok(report)
}
