use std::sync::Mutex;

use rand::Rng;

use super::{Parameter, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{gemm, MatRef, Tensor};

/// He-style uniform initialization, bound `sqrt(6 / fan_in)`.
fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

fn take_tape<T>(slot: &mut Option<T>, name: &str) -> Result<T> {
    slot.take().ok_or_else(|| Error::NoTape(name.to_string()))
}

fn expect_rank(x: &Tensor, rank: usize, what: &str) -> Result<()> {
    if x.rank() != rank {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("expected {what}"),
        });
    }
    Ok(())
}

/// Fully-connected layer `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub(crate) name: String,
    pub(crate) weight: Parameter,
    pub(crate) bias: Parameter,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            name: name.to_string(),
            weight: Parameter::new(
                format!("{name}.weight"),
                fan_in_uniform(&[fan_in, fan_out], fan_in, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
            input: None,
        }
    }

    /// All-zero weights and bias.
    pub fn zeros(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            name: name.to_string(),
            weight: Parameter::new(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
            input: None,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn weight(&self) -> &Parameter {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Parameter {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Parameter {
        &mut self.bias
    }

    pub(crate) fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 2, "batch×features")?;
        let (b, fan_in, fan_out) = (x.shape()[0], self.fan_in(), self.fan_out());
        if x.shape()[1] != fan_in {
            return Err(Error::shape("linear", x.shape(), self.weight.value().shape()));
        }
        let mut out = vec![0.0; b * fan_out];
        let w = self.weight.value().data();
        let bias = self.bias.value().data();
        const ROWS: usize = 32;
        exec::for_each_chunk_mut(&mut out, ROWS * fan_out, |chunk, dst| {
            let rows = dst.len() / fan_out;
            for r in dst.chunks_exact_mut(fan_out) {
                r.copy_from_slice(bias);
            }
            let src = &x.data()[chunk * ROWS * fan_in..];
            gemm(
                rows,
                fan_in,
                fan_out,
                1.0,
                MatRef::row_major(src, fan_in),
                MatRef::row_major(w, fan_out),
                1.0,
                dst,
                fan_out,
            );
        });
        Tensor::new(vec![b, fan_out], out)
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward_eval(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = take_tape(&mut self.input, &self.name)?;
        let (b, fan_in, fan_out) = (x.shape()[0], self.fan_in(), self.fan_out());
        if grad.shape() != [b, fan_out] {
            return Err(Error::shape("linear backward", grad.shape(), &[b, fan_out]));
        }
        // dW += xᵀ·dy
        gemm(
            fan_in,
            b,
            fan_out,
            1.0,
            MatRef::transposed(x.data(), fan_in),
            MatRef::row_major(grad.data(), fan_out),
            1.0,
            self.weight.grad_mut(),
            fan_out,
        );
        let db = self.bias.grad_mut();
        for row in grad.data().chunks_exact(fan_out) {
            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
        }
        // dx = dy·Wᵀ
        let mut dx = vec![0.0; b * fan_in];
        gemm(
            b,
            fan_out,
            fan_in,
            1.0,
            MatRef::row_major(grad.data(), fan_out),
            MatRef::transposed(self.weight.value().data(), fan_out),
            0.0,
            &mut dx,
            fan_in,
        );
        Tensor::new(vec![b, fan_in], dx)
    }

    pub(crate) fn has_tape(&self) -> bool {
        self.input.is_some()
    }

    pub(crate) fn clear_tape(&mut self) {
        self.input = None;
    }
}

/// Square-kernel 2-D convolution over `B×C×H×W` batches.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub(crate) name: String,
    pub(crate) in_channels: usize,
    pub(crate) out_channels: usize,
    pub(crate) kernel: usize,
    pub(crate) stride: usize,
    pub(crate) padding: usize,
    pub(crate) weight: Parameter,
    pub(crate) bias: Parameter,
    input: Option<Tensor>,
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.s + ki) as isize - g.p as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + ih as usize) * g.w..][..g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.s + kj) as isize - g.p as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.s + ki) as isize - g.p as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + ih as usize) * g.w..][..g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.s + kj) as isize - g.p as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Samples per work unit in the convolution backward pass.
const CONV_CHUNK: usize = 8;

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv `{name}`: channels, kernel and stride must be positive"
            )));
        }
        let fan_in = in_channels * kernel * kernel;
        Ok(Conv2d {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Parameter::new(
                format!("{name}.weight"),
                fan_in_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            input: None,
        })
    }

    /// Output spatial size `(n + 2p - k) / s + 1`.
    pub fn output_size(&self, n: usize) -> Result<usize> {
        let padded = n + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::InvalidShape {
                shape: vec![n],
                reason: format!(
                    "kernel {} does not fit padded extent {padded}",
                    self.kernel
                ),
            });
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    fn geometry(&self, x: &Tensor) -> Result<(usize, ConvGeometry)> {
        expect_rank(x, 4, "B×C×H×W")?;
        let &[b, c, h, w] = x.shape() else { unreachable!() };
        if c != self.in_channels {
            return Err(Error::shape("conv2d", x.shape(), self.weight.value().shape()));
        }
        Ok((
            b,
            ConvGeometry {
                c,
                h,
                w,
                k: self.kernel,
                s: self.stride,
                p: self.padding,
                ho: self.output_size(h)?,
                wo: self.output_size(w)?,
            },
        ))
    }

    pub(crate) fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let (b, g) = self.geometry(x)?;
        let (o, kk, p) = (self.out_channels, g.patch(), g.positions());
        let sample_in = g.c * g.h * g.w;
        let w = self.weight.value().data();
        let bias = self.bias.value().data();
        let mut out = vec![0.0; b * o * p];
        exec::for_each_chunk_mut(&mut out, o * p, |s, dst| {
            let mut cols = vec![0.0; kk * p];
            im2col(&x.data()[s * sample_in..(s + 1) * sample_in], &g, &mut cols);
            for (row, &bv) in dst.chunks_exact_mut(p).zip(bias) {
                row.fill(bv);
            }
            gemm(
                o,
                kk,
                p,
                1.0,
                MatRef::row_major(w, kk),
                MatRef::row_major(&cols, p),
                1.0,
                dst,
                p,
            );
        });
        Tensor::new(vec![b, o, g.ho, g.wo], out)
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward_eval(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = take_tape(&mut self.input, &self.name)?;
        let (b, g) = self.geometry(&x)?;
        let (o, kk, p) = (self.out_channels, g.patch(), g.positions());
        if grad.shape() != [b, o, g.ho, g.wo] {
            return Err(Error::shape("conv2d backward", grad.shape(), &[b, o, g.ho, g.wo]));
        }
        let sample_in = g.c * g.h * g.w;
        let w = self.weight.value().data();
        let chunks = b.div_ceil(CONV_CHUNK);
        let partials: Mutex<Vec<Option<(Vec<f64>, Vec<f64>)>>> = Mutex::new(vec![None; chunks]);
        let mut dx = vec![0.0; b * sample_in];
        exec::for_each_chunk_mut(&mut dx, CONV_CHUNK * sample_in, |chunk, dx_chunk| {
            let mut dw = vec![0.0; o * kk];
            let mut db = vec![0.0; o];
            let mut cols = vec![0.0; kk * p];
            let mut dcols = vec![0.0; kk * p];
            for (i, dx_s) in dx_chunk.chunks_exact_mut(sample_in).enumerate() {
                let s = chunk * CONV_CHUNK + i;
                let gy = &grad.data()[s * o * p..(s + 1) * o * p];
                im2col(&x.data()[s * sample_in..(s + 1) * sample_in], &g, &mut cols);
                gemm(
                    o,
                    p,
                    kk,
                    1.0,
                    MatRef::row_major(gy, p),
                    MatRef::transposed(&cols, p),
                    1.0,
                    &mut dw,
                    kk,
                );
                for (d, row) in db.iter_mut().zip(gy.chunks_exact(p)) {
                    *d += row.iter().sum::<f64>();
                }
                gemm(
                    kk,
                    o,
                    p,
                    1.0,
                    MatRef::transposed(w, kk),
                    MatRef::row_major(gy, p),
                    0.0,
                    &mut dcols,
                    p,
                );
                col2im(&dcols, &g, dx_s);
            }
            partials.lock().unwrap()[chunk] = Some((dw, db));
        });
        // fixed-order reduction keeps results independent of scheduling
        for part in partials.into_inner().unwrap() {
            let (dw, db) = part.expect("every chunk reports");
            self.weight
                .grad_mut()
                .iter_mut()
                .zip(&dw)
                .for_each(|(a, v)| *a += v);
            self.bias
                .grad_mut()
                .iter_mut()
                .zip(&db)
                .for_each(|(a, v)| *a += v);
        }
        Tensor::new(x.shape().to_vec(), dx)
    }

    pub(crate) fn has_tape(&self) -> bool {
        self.input.is_some()
    }

    pub(crate) fn clear_tape(&mut self) {
        self.input = None;
    }
}

/// Per-channel batch normalization over `B×C` or `B×C×H×W` inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub(crate) name: String,
    pub(crate) gamma: Parameter,
    pub(crate) beta: Parameter,
    running_mean: Tensor,
    running_var: Tensor,
    eps: f64,
    momentum: f64,
    tape: Option<BnTape>,
}

#[derive(Clone, Debug)]
struct BnTape {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(name: &str, features: usize) -> Self {
        Self::with_hyperparameters(name, features, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM)
            .expect("default hyperparameters are valid")
    }

    pub fn with_hyperparameters(name: &str, features: usize, eps: f64, momentum: f64) -> Result<Self> {
        if eps <= 0.0 || !(0.0..=1.0).contains(&momentum) || features == 0 {
            return Err(Error::InvalidConfig(format!(
                "batch norm `{name}`: need features > 0, eps > 0, momentum in [0, 1]"
            )));
        }
        Ok(BatchNorm {
            name: name.to_string(),
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[features], 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[features])),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], 1.0),
            eps,
            momentum,
            tape: None,
        })
    }

    pub fn features(&self) -> usize {
        self.gamma.value().numel()
    }

    pub fn running_mean(&self) -> &Tensor {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor {
        &self.running_var
    }

    pub(crate) fn buffers(&self) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{}.running_mean", self.name), &self.running_mean),
            (format!("{}.running_var", self.name), &self.running_var),
        ]
    }

    pub(crate) fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{}.running_mean", self.name), &mut self.running_mean),
            (format!("{}.running_var", self.name), &mut self.running_var),
        ]
    }

    pub(crate) fn parameters_and_buffers_mut(&mut self) -> (Vec<&mut Parameter>, Vec<(String, &mut Tensor)>) {
        (
            vec![&mut self.gamma, &mut self.beta],
            vec![
                (format!("{}.running_mean", self.name), &mut self.running_mean),
                (format!("{}.running_var", self.name), &mut self.running_var),
            ],
        )
    }

    /// (batch, channels, spatial) for a supported input.
    fn layout(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (b, c, inner) = match *x.shape() {
            [b, c] => (b, c, 1),
            [b, c, h, w] => (b, c, h * w),
            _ => {
                return Err(Error::InvalidShape {
                    shape: x.shape().to_vec(),
                    reason: "batch norm expects B×C or B×C×H×W".into(),
                })
            }
        };
        if c != self.features() {
            return Err(Error::shape("batch_norm", x.shape(), self.gamma.value().shape()));
        }
        Ok((b, c, inner))
    }

    pub(crate) fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, inner) = self.layout(x)?;
        let mut out = x.clone();
        let data = out.data_mut();
        for ch in 0..c {
            let inv = 1.0 / (self.running_var.data()[ch] + self.eps).sqrt();
            let (g, be, m) = (
                self.gamma.value().data()[ch],
                self.beta.value().data()[ch],
                self.running_mean.data()[ch],
            );
            for n in 0..b {
                for v in &mut data[(n * c + ch) * inner..][..inner] {
                    *v = g * (*v - m) * inv + be;
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (b, c, inner) = self.layout(x)?;
        let m = b * inner;
        if m < 2 {
            return Err(Error::InvalidArgument(
                "batch norm needs more than one value per channel in train mode".into(),
            ));
        }
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let idx = |n: usize| (n * c + ch) * inner;
            let mut sum = 0.0;
            for n in 0..b {
                sum += x.data()[idx(n)..][..inner].iter().sum::<f64>();
            }
            let mean = sum / m as f64;
            let mut sq = 0.0;
            for n in 0..b {
                sq += x.data()[idx(n)..][..inner]
                    .iter()
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>();
            }
            let var = sq / m as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = inv;
            let (g, be) = (self.gamma.value().data()[ch], self.beta.value().data()[ch]);
            for n in 0..b {
                let range = idx(n)..idx(n) + inner;
                for (xh, o) in xhat.data_mut()[range.clone()]
                    .iter_mut()
                    .zip(&mut out.data_mut()[range])
                {
                    *xh = (*xh - mean) * inv;
                    *o = g * *xh + be;
                }
            }
            let unbiased = sq / (m - 1) as f64;
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = (1.0 - self.momentum) * *rm + self.momentum * mean;
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased;
        }
        self.tape = Some(BnTape { xhat, inv_std });
        Ok(out)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let BnTape { xhat, inv_std } = take_tape(&mut self.tape, &self.name)?;
        if grad.shape() != xhat.shape() {
            return Err(Error::shape("batch_norm backward", grad.shape(), xhat.shape()));
        }
        let (b, c, inner) = self.layout(&xhat)?;
        let m = (b * inner) as f64;
        let mut dx = vec![0.0; grad.numel()];
        for ch in 0..c {
            let idx = |n: usize| (n * c + ch) * inner;
            let g = self.gamma.value().data()[ch];
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for n in 0..b {
                for (dy, xh) in grad.data()[idx(n)..][..inner]
                    .iter()
                    .zip(&xhat.data()[idx(n)..][..inner])
                {
                    sum_dy += dy;
                    sum_dy_xhat += dy * xh;
                }
            }
            self.gamma.grad_mut()[ch] += sum_dy_xhat;
            self.beta.grad_mut()[ch] += sum_dy;
            let k = g * inv_std[ch] / m;
            for n in 0..b {
                let r = idx(n)..idx(n) + inner;
                for ((d, dy), xh) in dx[r.clone()]
                    .iter_mut()
                    .zip(&grad.data()[r.clone()])
                    .zip(&xhat.data()[r])
                {
                    *d = k * (m * dy - sum_dy - xh * sum_dy_xhat);
                }
            }
        }
        Tensor::new(grad.shape().to_vec(), dx)
    }

    pub(crate) fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    pub(crate) fn clear_tape(&mut self) {
        self.tape = None;
    }
}

#[derive(Clone, Debug)]
pub struct Relu {
    pub(crate) name: String,
    input: Option<Tensor>,
}

impl Relu {
    pub fn new(name: &str) -> Self {
        Relu {
            name: name.to_string(),
            input: None,
        }
    }

    pub(crate) fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.map(|v| v.max(0.0)))
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.input = Some(x.clone());
        self.forward_eval(x)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = take_tape(&mut self.input, &self.name)?;
        if grad.shape() != x.shape() {
            return Err(Error::shape("relu backward", grad.shape(), x.shape()));
        }
        let data = grad
            .data()
            .iter()
            .zip(x.data())
            .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub(crate) fn has_tape(&self) -> bool {
        self.input.is_some()
    }

    pub(crate) fn clear_tape(&mut self) {
        self.input = None;
    }
}

/// Non-overlapping `k×k` average pooling.
#[derive(Clone, Debug)]
pub struct AvgPool {
    pub(crate) name: String,
    pub(crate) kernel: usize,
    input_shape: Option<Vec<usize>>,
}

impl AvgPool {
    pub fn new(name: &str, kernel: usize) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::InvalidConfig(format!("pool `{name}`: kernel must be positive")));
        }
        Ok(AvgPool {
            name: name.to_string(),
            kernel,
            input_shape: None,
        })
    }

    fn check(&self, x: &Tensor) -> Result<[usize; 4]> {
        expect_rank(x, 4, "B×C×H×W")?;
        let &[b, c, h, w] = x.shape() else { unreachable!() };
        if h % self.kernel != 0 || w % self.kernel != 0 {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: format!("spatial size not divisible by pool kernel {}", self.kernel),
            });
        }
        Ok([b, c, h, w])
    }

    pub(crate) fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let [b, c, h, w] = self.check(x)?;
        let k = self.kernel;
        let (ho, wo) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; b * c * ho * wo];
        for (plane, dst) in out.chunks_exact_mut(ho * wo).enumerate() {
            let src = &x.data()[plane * h * w..][..h * w];
            for i in 0..h {
                for j in 0..w {
                    dst[(i / k) * wo + j / k] += src[i * w + j];
                }
            }
            dst.iter_mut().for_each(|v| *v *= norm);
        }
        Tensor::new(vec![b, c, ho, wo], out)
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward_eval(x)?;
        self.input_shape = Some(x.shape().to_vec());
        Ok(y)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = take_tape(&mut self.input_shape, &self.name)?;
        let &[b, c, h, w] = shape.as_slice() else { unreachable!() };
        let k = self.kernel;
        let (ho, wo) = (h / k, w / k);
        if grad.shape() != [b, c, ho, wo] {
            return Err(Error::shape("avg_pool backward", grad.shape(), &[b, c, ho, wo]));
        }
        let norm = 1.0 / (k * k) as f64;
        let mut dx = vec![0.0; b * c * h * w];
        for (plane, dst) in dx.chunks_exact_mut(h * w).enumerate() {
            let src = &grad.data()[plane * ho * wo..][..ho * wo];
            for i in 0..h {
                for j in 0..w {
                    dst[i * w + j] = src[(i / k) * wo + j / k] * norm;
                }
            }
        }
        Tensor::new(shape, dx)
    }

    pub(crate) fn has_tape(&self) -> bool {
        self.input_shape.is_some()
    }

    pub(crate) fn clear_tape(&mut self) {
        self.input_shape = None;
    }
}

/// Collapses every axis after the batch axis.
#[derive(Clone, Debug)]
pub struct Flatten {
    pub(crate) name: String,
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new(name: &str) -> Self {
        Flatten {
            name: name.to_string(),
            input_shape: None,
        }
    }

    pub(crate) fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() < 2 {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "flatten expects a batch axis plus features".into(),
            });
        }
        let b = x.shape()[0];
        x.reshape(&[b, x.numel() / b])
    }

    pub(crate) fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward_eval(x)?;
        self.input_shape = Some(x.shape().to_vec());
        Ok(y)
    }

    pub(crate) fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = take_tape(&mut self.input_shape, &self.name)?;
        grad.reshape(&shape)
    }

    pub(crate) fn has_tape(&self) -> bool {
        self.input_shape.is_some()
    }

    pub(crate) fn clear_tape(&mut self) {
        self.input_shape = None;
    }
}
