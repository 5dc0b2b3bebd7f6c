//! Discrete Fourier transforms over trailing axes and the regression
//! targets derived from them.
//!
//! The forward transform is unnormalized,
//! `X[k] = Σ_n x[n] · exp(-2πi Σ_d k_d n_d / N_d)`, computed one axis at a
//! time from the innermost (width) outwards: width, then height, then
//! channel. Axes whose length is a power of two use an iterative radix-2
//! decimation-in-time FFT; any other length falls back to the direct sum.
//! The inverse carries the full `1/∏N_d` factor.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{ComplexTensor, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Cpx {
    re: f64,
    im: f64,
}

impl Cpx {
    #[inline]
    fn mul(self, o: Cpx) -> Cpx {
        Cpx {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }
    #[inline]
    fn add(self, o: Cpx) -> Cpx {
        Cpx {
            re: self.re + o.re,
            im: self.im + o.im,
        }
    }
    #[inline]
    fn sub(self, o: Cpx) -> Cpx {
        Cpx {
            re: self.re - o.re,
            im: self.im - o.im,
        }
    }
}

/// Number of trailing axes a transform covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DftDims {
    /// Width only.
    One = 1,
    /// Height and width.
    Two = 2,
    /// Channel, height and width.
    Three = 3,
}

impl DftDims {
    pub fn count(self) -> usize {
        self as usize
    }

    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            1 => Ok(DftDims::One),
            2 => Ok(DftDims::Two),
            3 => Ok(DftDims::Three),
            _ => Err(Error::InvalidArgument(format!(
                "DFT dimensionality must be 1, 2 or 3, got {n}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Direction {
    Forward,
    Inverse,
}

/// Precomputed tables for one axis length.
struct AxisPlan {
    n: usize,
    /// `exp(sign·2πi·j/n)` for `j in 0..n`.
    twiddles: Vec<Cpx>,
    /// Present only for power-of-two lengths.
    bitrev: Option<Vec<usize>>,
}

impl AxisPlan {
    fn new(n: usize, sign: f64) -> Self {
        let twiddles = (0..n)
            .map(|j| {
                let theta = sign * 2.0 * PI * j as f64 / n as f64;
                Cpx {
                    re: theta.cos(),
                    im: theta.sin(),
                }
            })
            .collect();
        let bitrev = n.is_power_of_two().then(|| {
            let bits = n.trailing_zeros();
            (0..n)
                .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
                .collect()
        });
        AxisPlan {
            n,
            twiddles,
            bitrev,
        }
    }

    /// Transforms `line` in place; `scratch` must have length `n`.
    fn run(&self, line: &mut [Cpx], scratch: &mut [Cpx]) {
        match &self.bitrev {
            Some(rev) => self.radix2(line, rev),
            None => self.direct(line, scratch),
        }
    }

    fn radix2(&self, line: &mut [Cpx], rev: &[usize]) {
        let n = self.n;
        for i in 0..n {
            let j = rev[i];
            if i < j {
                line.swap(i, j);
            }
        }
        let mut half = 1;
        while half < n {
            let step = n / (2 * half);
            for start in (0..n).step_by(2 * half) {
                for k in 0..half {
                    let w = self.twiddles[k * step];
                    let a = line[start + k];
                    let b = line[start + k + half].mul(w);
                    line[start + k] = a.add(b);
                    line[start + k + half] = a.sub(b);
                }
            }
            half *= 2;
        }
    }

    fn direct(&self, line: &mut [Cpx], scratch: &mut [Cpx]) {
        let n = self.n;
        for (k, out) in scratch.iter_mut().enumerate() {
            let mut acc = Cpx::default();
            for (j, &x) in line.iter().enumerate() {
                acc = acc.add(x.mul(self.twiddles[(k * j) % n]));
            }
            *out = acc;
        }
        line.copy_from_slice(scratch);
    }
}

fn transform_axis(buf: &mut [Cpx], shape: &[usize], axis: usize, sign: f64) {
    let n = shape[axis];
    if n == 1 {
        return;
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let plan = AxisPlan::new(n, sign);
    exec::for_each_chunk_mut(buf, n * inner, |_, block| {
        let mut line = vec![Cpx::default(); n];
        let mut scratch = vec![Cpx::default(); n];
        for i in 0..inner {
            for (j, v) in line.iter_mut().enumerate() {
                *v = block[j * inner + i];
            }
            plan.run(&mut line, &mut scratch);
            for (j, v) in line.iter().enumerate() {
                block[j * inner + i] = *v;
            }
        }
    });
}

fn check_dims(shape: &[usize], dims: DftDims) -> Result<()> {
    if dims.count() > shape.len() {
        return Err(Error::DimsExceedRank {
            dims: dims.count(),
            rank: shape.len(),
        });
    }
    Ok(())
}

fn transform(
    re: &[f64],
    im: Option<&[f64]>,
    shape: &[usize],
    dims: DftDims,
    direction: Direction,
    twiddle_sign: f64,
) -> Result<ComplexTensor> {
    check_dims(shape, dims)?;
    let mut buf: Vec<Cpx> = match im {
        Some(im) => re.iter().zip(im).map(|(&re, &im)| Cpx { re, im }).collect(),
        None => re.iter().map(|&re| Cpx { re, im: 0.0 }).collect(),
    };
    let rank = shape.len();
    // innermost axis first
    for axis in (rank - dims.count()..rank).rev() {
        transform_axis(&mut buf, shape, axis, twiddle_sign);
    }
    let scale = match direction {
        Direction::Forward => 1.0,
        Direction::Inverse => {
            1.0 / shape[rank - dims.count()..].iter().product::<usize>() as f64
        }
    };
    let (re, im) = buf.iter().map(|c| (c.re * scale, c.im * scale)).unzip();
    ComplexTensor::new(
        Tensor::new(shape.to_vec(), re)?,
        Tensor::new(shape.to_vec(), im)?,
    )
}

/// Unnormalized forward DFT over the last `dims` axes of `x`.
pub fn dft_forward(x: &Tensor, dims: DftDims) -> Result<ComplexTensor> {
    transform(x.data(), None, x.shape(), dims, Direction::Forward, -1.0)
}

/// Forward DFT of an already complex input.
pub fn dft_forward_complex(x: &ComplexTensor, dims: DftDims) -> Result<ComplexTensor> {
    transform(
        x.re().data(),
        Some(x.im().data()),
        x.shape(),
        dims,
        Direction::Forward,
        -1.0,
    )
}

/// Inverse DFT, scaled by `1/∏N_d` so that it undoes [`dft_forward`].
pub fn dft_inverse(x: &ComplexTensor, dims: DftDims) -> Result<ComplexTensor> {
    transform(
        x.re().data(),
        Some(x.im().data()),
        x.shape(),
        dims,
        Direction::Inverse,
        1.0,
    )
}

/// Forward transform with the twiddle sign flipped. Used to check that the
/// verification suite catches a sign error.
#[doc(hidden)]
pub fn dft_forward_sign_flipped(x: &Tensor, dims: DftDims) -> Result<ComplexTensor> {
    transform(x.data(), None, x.shape(), dims, Direction::Forward, 1.0)
}

/// Real-valued view of a complex spectrum used as a regression target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Formulation {
    Real,
    Imag,
    RealImag,
    Magnitude,
    Phase,
    MagPhase,
}

impl Formulation {
    pub const ALL: [Formulation; 6] = [
        Formulation::Real,
        Formulation::Imag,
        Formulation::RealImag,
        Formulation::Magnitude,
        Formulation::Phase,
        Formulation::MagPhase,
    ];

    /// 2 for the concatenated formulations, 1 otherwise.
    pub fn parts(self) -> usize {
        match self {
            Formulation::RealImag | Formulation::MagPhase => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Formulation::Real => "real",
            Formulation::Imag => "imag",
            Formulation::RealImag => "real_imag",
            Formulation::Magnitude => "magnitude",
            Formulation::Phase => "phase",
            Formulation::MagPhase => "mag_phase",
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Formulation::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown formulation `{s}`")))
    }
}

/// Phase in `(-π, π]`, with the phase of zero defined as 0.
pub fn phase(re: f64, im: f64) -> f64 {
    if re == 0.0 && im == 0.0 {
        return 0.0;
    }
    let p = im.atan2(re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

/// Converts a spectrum to its real-valued target form. Two-part
/// formulations stack along a new leading axis.
pub fn extract_components(x: &ComplexTensor, formulation: Formulation) -> Tensor {
    let (re, im) = (x.re(), x.im());
    let magnitude = || {
        let data = re.data().iter().zip(im.data()).map(|(a, b)| a.hypot(*b)).collect();
        Tensor::new(re.shape().to_vec(), data).expect("shape preserved")
    };
    let phase_t = || {
        let data = re.data().iter().zip(im.data()).map(|(a, b)| phase(*a, *b)).collect();
        Tensor::new(re.shape().to_vec(), data).expect("shape preserved")
    };
    match formulation {
        Formulation::Real => re.clone(),
        Formulation::Imag => im.clone(),
        Formulation::Magnitude => magnitude(),
        Formulation::Phase => phase_t(),
        Formulation::RealImag => Tensor::stack(&[re.clone(), im.clone()]).expect("same shape"),
        Formulation::MagPhase => Tensor::stack(&[magnitude(), phase_t()]).expect("same shape"),
    }
}

/// Portion of the width spectrum kept as a target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SpectrumFraction {
    #[default]
    Full,
    Quarter,
    Eighth,
}

impl SpectrumFraction {
    pub fn denominator(self) -> usize {
        match self {
            SpectrumFraction::Full => 1,
            SpectrumFraction::Quarter => 4,
            SpectrumFraction::Eighth => 8,
        }
    }

    pub fn as_f64(self) -> f64 {
        1.0 / self.denominator() as f64
    }

    pub fn from_f64(f: f64) -> Result<Self> {
        [
            SpectrumFraction::Full,
            SpectrumFraction::Quarter,
            SpectrumFraction::Eighth,
        ]
        .into_iter()
        .find(|s| (s.as_f64() - f).abs() < 1e-12)
        .ok_or_else(|| {
            Error::InvalidArgument(format!("spectrum fraction must be 1, 0.25 or 0.125, got {f}"))
        })
    }
}

/// Which low-frequency indices a partial mask keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum MaskBand {
    /// Equal runs at both ends of the index axis, where the low
    /// frequencies of a real signal sit.
    #[default]
    Symmetric,
    /// A single run `0..N·f`.
    OneSided,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyMask {
    length: usize,
    kept: Vec<usize>,
}

impl FrequencyMask {
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn kept_indices(&self) -> &[usize] {
        &self.kept
    }

    pub fn is_full(&self) -> bool {
        self.kept.len() == self.length
    }
}

pub fn build_mask(n: usize, fraction: SpectrumFraction, band: MaskBand) -> Result<FrequencyMask> {
    if n == 0 {
        return Err(Error::InvalidArgument("mask length must be positive".into()));
    }
    let kept = match fraction {
        SpectrumFraction::Full => (0..n).collect(),
        _ => {
            if !n.is_multiple_of(8) {
                return Err(Error::InvalidArgument(format!(
                    "partial spectrum masks need a length divisible by 8, got {n}"
                )));
            }
            let keep = n / fraction.denominator();
            match band {
                MaskBand::Symmetric => (0..keep / 2).chain(n - keep / 2..n).collect(),
                MaskBand::OneSided => (0..keep).collect(),
            }
        }
    };
    Ok(FrequencyMask { length: n, kept })
}

/// Restricts the last axis of `t` to the mask's kept indices.
pub fn apply_mask(t: &Tensor, mask: &FrequencyMask) -> Result<Tensor> {
    let last = t.shape().last().copied().unwrap_or(0);
    if last != mask.length {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            left: t.shape().to_vec(),
            right: vec![mask.length],
        });
    }
    if mask.is_full() {
        return Ok(t.clone());
    }
    t.gather_last(&mask.kept)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Normalization {
    /// Raw sums of the forward transform.
    Unnormalized,
    /// Amplitudes scaled by `1/sqrt(∏N_d)`; phases are unaffected.
    #[default]
    Orthonormal,
}

/// Declarative description of a DFT regression target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TargetSpec {
    pub dims: DftDims,
    pub formulation: Formulation,
    pub fraction: SpectrumFraction,
    pub normalization: Normalization,
    pub band: MaskBand,
}

impl TargetSpec {
    pub fn new(dims: DftDims, formulation: Formulation) -> Self {
        TargetSpec {
            dims,
            formulation,
            fraction: SpectrumFraction::Full,
            normalization: Normalization::Orthonormal,
            band: MaskBand::Symmetric,
        }
    }

    pub fn with_fraction(mut self, fraction: SpectrumFraction) -> Self {
        self.fraction = fraction;
        self
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn with_band(mut self, band: MaskBand) -> Self {
        self.band = band;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.fraction != SpectrumFraction::Full && self.dims != DftDims::One {
            return Err(Error::InvalidConfig(
                "spectrum fraction below 1 requires a 1D (width) transform".into(),
            ));
        }
        Ok(())
    }

    /// Number of target values produced for one `C×H×W` image.
    pub fn target_len(&self, image_shape: &[usize]) -> Result<usize> {
        let &[c, h, w] = image_shape else {
            return Err(Error::InvalidShape {
                shape: image_shape.to_vec(),
                reason: "expected C×H×W".into(),
            });
        };
        self.validate()?;
        let kept = build_mask(w, self.fraction, self.band)?.kept.len();
        Ok(c * h * kept * self.formulation.parts())
    }
}

/// Builds the flattened target vector for one `C×H×W` image.
pub fn make_target(image: &Tensor, spec: &TargetSpec) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "expected C×H×W".into(),
        });
    }
    spec.validate()?;
    let mut spectrum = dft_forward(image, spec.dims)?;
    if spec.fraction != SpectrumFraction::Full {
        let mask = build_mask(image.shape()[2], spec.fraction, spec.band)?;
        spectrum = ComplexTensor::new(
            apply_mask(spectrum.re(), &mask)?,
            apply_mask(spectrum.im(), &mask)?,
        )?;
    }
    let components = extract_components(&spectrum, spec.formulation);
    let components = match spec.normalization {
        Normalization::Unnormalized => components,
        Normalization::Orthonormal => {
            let rank = image.rank();
            let n: usize = image.shape()[rank - spec.dims.count()..].iter().product();
            orthonormal_scale(components, spec.formulation, 1.0 / (n as f64).sqrt())
        }
    };
    let len = components.numel();
    components.into_shape(&[len])
}

fn orthonormal_scale(mut t: Tensor, formulation: Formulation, s: f64) -> Tensor {
    match formulation {
        Formulation::Phase => t,
        Formulation::MagPhase => {
            // first half is magnitude, second half phase
            let half = t.numel() / 2;
            t.data_mut()[..half].iter_mut().for_each(|x| *x *= s);
            t
        }
        _ => t.scale(s),
    }
}

/// Targets for a `B×C×H×W` batch, one row per sample.
pub fn make_targets(batch: &Tensor, spec: &TargetSpec) -> Result<Tensor> {
    let &[b, c, h, w] = batch.shape() else {
        return Err(Error::InvalidShape {
            shape: batch.shape().to_vec(),
            reason: "expected B×C×H×W".into(),
        });
    };
    let rows = exec::map_range(b, |i| {
        let img = Tensor::new(vec![c, h, w], batch.row(i).to_vec())?;
        make_target(&img, spec)
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let len = rows[0].numel();
    Tensor::stack(&rows)?.into_shape(&[b, len])
}

const AGGREGATE_CHUNK: usize = 64;

/// Mean width-DFT magnitude per frequency over a dataset of `C×H×W` images.
///
/// `fetch(i)` returns image `i`; images are summed in fixed-size chunks and
/// the chunk sums are combined in index order.
pub fn aggregate_magnitude_by<F>(count: usize, image_shape: &[usize], fetch: F) -> Result<Tensor>
where
    F: Fn(usize) -> Tensor + Sync + Send,
{
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let &[c, h, w] = image_shape else {
        return Err(Error::InvalidShape {
            shape: image_shape.to_vec(),
            reason: "expected C×H×W".into(),
        });
    };
    let partials = exec::map_chunks(count, AGGREGATE_CHUNK, |range| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; w];
        for i in range {
            let img = fetch(i);
            if img.shape() != image_shape {
                return Err(Error::shape("aggregate_magnitude", image_shape, img.shape()));
            }
            let x = dft_forward(&img, DftDims::One)?;
            for (j, (re, im)) in x.re().data().iter().zip(x.im().data()).enumerate() {
                acc[j % w] += re.hypot(*im);
            }
        }
        Ok(acc)
    });
    let mut total = vec![0.0; w];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p?) {
            *t += v;
        }
    }
    let norm = 1.0 / (count * c * h) as f64;
    Ok(Tensor::vector(total.into_iter().map(|v| v * norm).collect()))
}

pub fn aggregate_magnitude(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    aggregate_magnitude_by(images.len(), first.shape(), |i| images[i].clone())
}

/// Writes `k,value` rows for an aggregated spectrum.
pub fn write_spectrum_csv<W: Write>(mut out: W, spectrum: &Tensor) -> std::io::Result<()> {
    writeln!(out, "k,value")?;
    for (k, v) in spectrum.data().iter().enumerate() {
        writeln!(out, "{k},{v:.17e}")?;
    }
    Ok(())
}
