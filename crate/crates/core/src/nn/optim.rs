use std::collections::HashMap;

use super::Parameter;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerKind::Sgd { lr, momentum }
    }

    fn needs_state(&self) -> bool {
        match *self {
            OptimizerKind::Sgd { momentum, .. } => momentum != 0.0,
            OptimizerKind::Adam { .. } => true,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::adam(1e-3)
    }
}

#[derive(Clone, Debug)]
enum Aux {
    Velocity(Vec<f64>),
    Moments { m: Vec<f64>, v: Vec<f64> },
}

impl Aux {
    fn len(&self) -> usize {
        match self {
            Aux::Velocity(v) => v.len(),
            Aux::Moments { m, .. } => m.len(),
        }
    }
}

/// Update rule plus per-parameter auxiliary tensors keyed by name.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    state: HashMap<String, Aux>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            state: HashMap::new(),
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter, then clears their gradients.
    ///
    /// Auxiliary state is created on the first step; a parameter that shows
    /// up later without state is rejected.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        let first = self.steps == 0;
        if self.kind.needs_state() {
            for p in params.iter() {
                match self.state.get(p.name()) {
                    None if !first => {
                        return Err(Error::MissingOptimizerState(p.name().to_string()))
                    }
                    Some(aux) if aux.len() != p.numel() => {
                        return Err(Error::MissingOptimizerState(p.name().to_string()))
                    }
                    _ => {}
                }
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        for p in params.iter_mut() {
            let n = p.numel();
            let name = p.name().to_string();
            let (value, grad) = p.value_and_grad_mut();
            match self.kind {
                OptimizerKind::Sgd { lr, momentum } if momentum == 0.0 => {
                    value.iter_mut().zip(grad.iter()).for_each(|(w, g)| *w -= lr * g);
                }
                OptimizerKind::Sgd { lr, momentum } => {
                    let aux = self
                        .state
                        .entry(name)
                        .or_insert_with(|| Aux::Velocity(vec![0.0; n]));
                    let Aux::Velocity(vel) = aux else { unreachable!() };
                    for ((w, g), v) in value.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let aux = self.state.entry(name).or_insert_with(|| Aux::Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    });
                    let Aux::Moments { m, v } = aux else { unreachable!() };
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((w, g), m), v) in value
                        .iter_mut()
                        .zip(grad.iter())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            grad.fill(0.0);
        }
        Ok(())
    }
}
