//! Layer-level reverse-mode differentiation.
//!
//! A train-mode forward pass records, in each layer, whatever that layer
//! needs to run its backward pass (the tape). [`Network::backward`] walks
//! the layers in reverse, consumes the tape, accumulates parameter
//! gradients and returns the gradient with respect to the network input so
//! that networks can be chained. Gradients add up across backward calls
//! until [`Network::zero_grad`] clears them.

mod gradcheck;
mod layers;
mod loss;
mod optim;
mod residual;

use std::fmt;

pub use gradcheck::{check_gradients, finite_difference_check, GradCheckOptions, GradCheckReport};
pub use layers::{AvgPool, BatchNorm, Conv2d, Flatten, Linear, Relu};
pub use loss::{mse_loss, mse_loss_with_grad, softmax_cross_entropy};
pub use optim::{Optimizer, OptimizerKind};
pub use residual::ResidualBlock;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, tape recorded, running statistics updated.
    Train,
    /// Running statistics, nothing recorded or mutated.
    Eval,
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape("set_value", self.value.shape(), value.shape()));
        }
        self.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self) -> &mut [f64] {
        self.value.data_mut()
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        self.grad.data_mut()
    }

    pub(crate) fn value_and_grad_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.value.data_mut(), self.grad.data_mut())
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    FullyConnected,
    Conv2D,
    BatchNorm,
    ReLU,
    AvgPool,
    Flatten,
    ResidualBlock,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::FullyConnected,
        LayerKind::Conv2D,
        LayerKind::BatchNorm,
        LayerKind::ReLU,
        LayerKind::AvgPool,
        LayerKind::Flatten,
        LayerKind::ResidualBlock,
    ];
}

#[derive(Clone, Debug)]
pub enum Layer {
    Linear(Linear),
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu(Relu),
    AvgPool(AvgPool),
    Flatten(Flatten),
    Residual(ResidualBlock),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $e:expr) => {
        match $self {
            Layer::Linear($l) => $e,
            Layer::Conv2d($l) => $e,
            Layer::BatchNorm($l) => $e,
            Layer::Relu($l) => $e,
            Layer::AvgPool($l) => $e,
            Layer::Flatten($l) => $e,
            Layer::Residual($l) => $e,
        }
    };
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Linear(_) => LayerKind::FullyConnected,
            Layer::Conv2d(_) => LayerKind::Conv2D,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Relu(_) => LayerKind::ReLU,
            Layer::AvgPool(_) => LayerKind::AvgPool,
            Layer::Flatten(_) => LayerKind::Flatten,
            Layer::Residual(_) => LayerKind::ResidualBlock,
        }
    }

    pub fn name(&self) -> &str {
        dispatch!(self, l => &l.name)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let out = match mode {
            Mode::Train => dispatch!(self, l => l.forward_train(x)),
            Mode::Eval => dispatch!(&*self, l => l.forward_eval(x)),
        };
        out.map_err(|e| e.in_layer(self.name()))
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        dispatch!(self, l => l.forward_eval(x)).map_err(|e| e.in_layer(self.name()))
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        dispatch!(self, l => l.backward(grad)).map_err(|e| e.in_layer(self.name()))
    }

    pub fn has_tape(&self) -> bool {
        dispatch!(self, l => l.has_tape())
    }

    pub fn clear_tape(&mut self) {
        dispatch!(self, l => l.clear_tape())
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        match self {
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Residual(l) => l.parameters(),
            Layer::Relu(_) | Layer::AvgPool(_) | Layer::Flatten(_) => vec![],
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Residual(l) => l.parameters_mut(),
            Layer::Relu(_) | Layer::AvgPool(_) | Layer::Flatten(_) => vec![],
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        match self {
            Layer::BatchNorm(l) => l.buffers(),
            Layer::Residual(l) => l.buffers(),
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            Layer::BatchNorm(l) => l.buffers_mut(),
            Layer::Residual(l) => l.buffers_mut(),
            _ => vec![],
        }
    }

    pub(crate) fn parameters_and_buffers_mut(&mut self) -> (Vec<&mut Parameter>, Vec<(String, &mut Tensor)>) {
        match self {
            Layer::BatchNorm(l) => l.parameters_and_buffers_mut(),
            Layer::Residual(l) => l.parameters_and_buffers_mut(),
            other => (other.parameters_mut(), vec![]),
        }
    }

    /// One-line structural description without the instance name.
    pub fn describe(&self) -> String {
        match self {
            Layer::Linear(l) => format!("FullyConnected({}->{})", l.fan_in(), l.fan_out()),
            Layer::Conv2d(l) => format!(
                "Conv2D({}->{}, k{}, s{}, p{})",
                l.in_channels, l.out_channels, l.kernel, l.stride, l.padding
            ),
            Layer::BatchNorm(l) => format!("BatchNorm({})", l.features()),
            Layer::Relu(_) => "ReLU".into(),
            Layer::AvgPool(l) => format!("AvgPool(k{})", l.kernel),
            Layer::Flatten(_) => "Flatten".into(),
            Layer::Residual(l) => l.describe(),
        }
    }
}

/// An ordered stack of layers.
#[derive(Clone, Debug)]
pub struct Network {
    name: String,
    layers: Vec<Layer>,
    frozen: bool,
}

impl Network {
    pub fn new(name: impl Into<String>, layers: Vec<Layer>) -> Result<Self> {
        let net = Network {
            name: name.into(),
            layers,
            frozen: false,
        };
        let mut seen = std::collections::HashSet::new();
        for p in net.parameters() {
            if !seen.insert(p.name().to_string()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate parameter name `{}`",
                    p.name()
                )));
            }
        }
        Ok(net)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => {
                let mut h = x.clone();
                for layer in &mut self.layers {
                    h = layer.forward(&h, Mode::Train)?;
                }
                Ok(h)
            }
        }
    }

    /// Pure evaluation; safe to call concurrently on a shared network.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward_eval(&h)?;
        }
        Ok(h)
    }

    /// Back-propagates `grad` (∂loss/∂output) and returns ∂loss/∂input.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        if let Some(l) = self.layers.iter().find(|l| !l.has_tape()) {
            return Err(Error::NoTape(l.name().to_string()));
        }
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn clear_tape(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_tape);
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(Layer::parameters).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(Layer::parameters_mut).collect()
    }

    /// Parameters the optimizer may update; empty while frozen.
    pub fn trainable_parameters_mut(&mut self) -> Vec<&mut Parameter> {
        if self.frozen {
            Vec::new()
        } else {
            self.parameters_mut()
        }
    }

    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        self.layers.iter().flat_map(Layer::buffers).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers.iter_mut().flat_map(Layer::buffers_mut).collect()
    }

    /// Parameters followed by buffers, in layer order.
    pub fn state(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .parameters()
            .into_iter()
            .map(|p| (p.name().to_string(), p.value()))
            .collect();
        out.extend(self.buffers());
        out
    }

    pub fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        let mut buffers = Vec::new();
        for layer in &mut self.layers {
            let (params, bufs) = layer.parameters_and_buffers_mut();
            for p in params {
                let name = p.name().to_string();
                out.push((name, &mut p.value));
            }
            buffers.extend(bufs);
        }
        out.extend(buffers);
        out
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut().into_iter().for_each(Parameter::zero_grad);
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    pub fn describe(&self) -> Vec<String> {
        self.layers.iter().map(Layer::describe).collect()
    }

    /// FNV-1a over every parameter and buffer bit pattern.
    pub fn state_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.state() {
            eat(name.as_bytes());
            for x in t.data() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} ({} parameters)", self.name, self.parameter_count())?;
        for l in &self.layers {
            writeln!(f, "  {}: {}", l.name(), l.describe())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
