use rand::Rng;

use super::layers::{BatchNorm, Conv2d, Relu};
use super::Parameter;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Basic residual block:
/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`, where the
/// shortcut is the identity when shapes agree and a strided 1×1
/// convolution plus batch norm otherwise.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub(crate) name: String,
    conv1: Conv2d,
    bn1: BatchNorm,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
    out_relu: Relu,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), in_channels, out_channels, 3, stride, 1, rng)?;
        let conv2 = Conv2d::new(&format!("{name}.conv2"), out_channels, out_channels, 3, 1, 1, rng)?;
        let shortcut = if stride != 1 || in_channels != out_channels {
            Some((
                Conv2d::new(&format!("{name}.shortcut"), in_channels, out_channels, 1, stride, 0, rng)?,
                BatchNorm::new(&format!("{name}.shortcut_bn"), out_channels),
            ))
        } else {
            None
        };
        Ok(ResidualBlock {
            name: name.to_string(),
            conv1,
            bn1: BatchNorm::new(&format!("{name}.bn1"), out_channels),
            relu1: Relu::new(&format!("{name}.relu1")),
            conv2,
            bn2: BatchNorm::new(&format!("{name}.bn2"), out_channels),
            shortcut,
            out_relu: Relu::new(&format!("{name}.relu_out")),
        })
    }

    pub fn has_projection(&self) -> bool {
        self.shortcut.is_some()
    }

    pub(crate) fn describe(&self) -> String {
        format!(
            "ResidualBlock({}->{}, s{}{})",
            self.conv1.in_channels,
            self.conv1.out_channels,
            self.conv1.stride,
            if self.shortcut.is_some() { ", projection" } else { "" }
        )
    }

    pub(crate) fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward_eval(x)?;
        let h = self.bn1.forward_eval(&h)?;
        let h = self.relu1.forward_eval(&h)?;
        let h = self.conv2.forward_eval(&h)?;
        let h = self.bn2.forward_eval(&h)?;
        let s = match &self.shortcut {
            Some((conv, bn)) => bn.forward_eval(&conv.forward_eval(x)?)?,
            None => x.clone(),
        };
        self.out_relu.forward_eval(&h.add(&s)?)
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward_train(x)?;
        let h = self.bn1.forward_train(&h)?;
        let h = self.relu1.forward_train(&h)?;
        let h = self.conv2.forward_train(&h)?;
        let h = self.bn2.forward_train(&h)?;
        let s = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward_train(x)?;
                bn.forward_train(&s)?
            }
            None => x.clone(),
        };
        self.out_relu.forward_train(&h.add(&s)?)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        if !self.has_tape() {
            return Err(Error::NoTape(self.name.clone()));
        }
        let g = self.out_relu.backward(grad)?;
        let gh = self.bn2.backward(&g)?;
        let gh = self.conv2.backward(&gh)?;
        let gh = self.relu1.backward(&gh)?;
        let gh = self.bn1.backward(&gh)?;
        let mut dx = self.conv1.backward(&gh)?;
        let gs = match &mut self.shortcut {
            Some((conv, bn)) => {
                let gs = bn.backward(&g)?;
                conv.backward(&gs)?
            }
            None => g,
        };
        dx.add_assign(&gs)?;
        Ok(dx)
    }

    pub(crate) fn has_tape(&self) -> bool {
        self.out_relu.has_tape()
    }

    pub(crate) fn clear_tape(&mut self) {
        self.conv1.clear_tape();
        self.bn1.clear_tape();
        self.relu1.clear_tape();
        self.conv2.clear_tape();
        self.bn2.clear_tape();
        if let Some((c, b)) = &mut self.shortcut {
            c.clear_tape();
            b.clear_tape();
        }
        self.out_relu.clear_tape();
    }

    pub(crate) fn parameters(&self) -> Vec<&Parameter> {
        let mut v = vec![
            &self.conv1.weight,
            &self.conv1.bias,
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.bn2.gamma,
            &self.bn2.beta,
        ];
        if let Some((c, b)) = &self.shortcut {
            v.extend([&c.weight, &c.bias, &b.gamma, &b.beta]);
        }
        v
    }

    pub(crate) fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
        ];
        if let Some((c, b)) = &mut self.shortcut {
            v.extend([&mut c.weight, &mut c.bias, &mut b.gamma, &mut b.beta]);
        }
        v
    }

    pub(crate) fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.bn1.buffers();
        v.extend(self.bn2.buffers());
        if let Some((_, b)) = &self.shortcut {
            v.extend(b.buffers());
        }
        v
    }

    pub(crate) fn parameters_and_buffers_mut(&mut self) -> (Vec<&mut Parameter>, Vec<(String, &mut Tensor)>) {
        let (p1, mut b) = self.bn1.parameters_and_buffers_mut();
        let (p2, b2) = self.bn2.parameters_and_buffers_mut();
        let mut p = vec![&mut self.conv1.weight, &mut self.conv1.bias];
        p.extend(p1);
        p.extend([&mut self.conv2.weight, &mut self.conv2.bias]);
        p.extend(p2);
        b.extend(b2);
        if let Some((c, bn)) = &mut self.shortcut {
            let (p3, b3) = bn.parameters_and_buffers_mut();
            p.extend([&mut c.weight, &mut c.bias]);
            p.extend(p3);
            b.extend(b3);
        }
        (p, b)
    }

    pub(crate) fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.bn1.buffers_mut();
        v.extend(self.bn2.buffers_mut());
        if let Some((_, b)) = &mut self.shortcut {
            v.extend(b.buffers_mut());
        }
        v
    }
}
