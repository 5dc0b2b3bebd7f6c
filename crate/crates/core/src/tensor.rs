//! Dense row-major `f64` tensors.
//!
//! No broadcasting: every binary operation requires identical shapes and
//! reports a [`Error::ShapeMismatch`] otherwise.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if let Some(&d) = shape.iter().find(|&&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("dimension {d} is not positive"),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel = check_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {numel} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Panics if any dimension is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = check_shape(shape).expect("zero-sized dimension");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel = check_shape(shape).expect("zero-sized dimension");
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        Tensor::new(vec![n], data).expect("empty vector")
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        Tensor::from_fn(shape, |_| rng.random_range(low..high))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn elementwise(&self, other: &Tensor, op: BinaryOp) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("elementwise", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| op.apply(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, BinaryOp::Mul)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|x| x * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Matrix product of a `M×K` and a `K×N` tensor.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (self.shape.as_slice(), other.shape.as_slice()) else {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        };
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            MatRef::row_major(&self.data, k),
            MatRef::row_major(&other.data, n),
            0.0,
            &mut out,
            n,
        );
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel = check_shape(shape)?;
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Consuming reshape that reuses the buffer.
    pub fn into_shape(self, shape: &[usize]) -> Result<Tensor> {
        let numel = check_shape(shape)?;
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Permutes axes: output axis `i` is input axis `axes[i]`.
    pub fn transpose(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::InvalidArgument(format!(
                "axes {axes:?} are not a permutation of 0..{rank}"
            )));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.numel() {
            data.push(self.data[offset]);
            // odometer increment over output indices
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                offset += perm_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= perm_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Restricts `axis` to `range`.
    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Tensor> {
        if axis >= self.rank() || range.start >= range.end || range.end > self.shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice {range:?} on axis {axis} of shape {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let mut data = Vec::with_capacity(outer * range.len() * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&self.data[base + range.start * inner..base + range.end * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = range.len();
        Ok(Tensor { shape, data })
    }

    /// Gathers the listed indices of the last axis, in the given order.
    pub fn gather_last(&self, indices: &[usize]) -> Result<Tensor> {
        let last = *self.shape.last().ok_or_else(|| {
            Error::InvalidArgument("gather on a rank-0 tensor".into())
        })?;
        if indices.is_empty() || indices.iter().any(|&i| i >= last) {
            return Err(Error::InvalidArgument(format!(
                "gather indices out of range for axis length {last}"
            )));
        }
        let data = self
            .data
            .chunks_exact(last)
            .flat_map(|row| indices.iter().map(move |&i| row[i]))
            .collect();
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = indices.len();
        Ok(Tensor { shape, data })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// View of sample `i` along the leading axis as a flat slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.numel() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Paired real/imaginary parts of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    re: Tensor,
    im: Tensor,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape != im.shape {
            return Err(Error::shape("complex", &re.shape, &im.shape));
        }
        Ok(ComplexTensor { re, im })
    }

    pub fn from_real(re: Tensor) -> Self {
        let im = Tensor::zeros(re.shape());
        ComplexTensor { re, im }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn re(&self) -> &Tensor {
        &self.re
    }

    pub fn im(&self) -> &Tensor {
        &self.im
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.re, self.im)
    }

    pub fn conj(&self) -> ComplexTensor {
        ComplexTensor {
            re: self.re.clone(),
            im: self.im.scale(-1.0),
        }
    }

    pub fn scale(&self, factor: f64) -> ComplexTensor {
        ComplexTensor {
            re: self.re.scale(factor),
            im: self.im.scale(factor),
        }
    }

    pub fn gather_last(&self, indices: &[usize]) -> Result<ComplexTensor> {
        Ok(ComplexTensor {
            re: self.re.gather_last(indices)?,
            im: self.im.gather_last(indices)?,
        })
    }
}

/// Borrowed strided matrix operand for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` matrix stored in `data`.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.row_stride + (cols - 1) * self.col_stride + 1
    }
}

/// `c = alpha * a·b + beta * c` with `a: m×k`, `b: k×n`, `c` row-major with
/// row stride `ldc`. When `beta == 0`, `c` is not read.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // matrixmultiply handles this too, but would still read pointers.
        for r in 0..m {
            for x in &mut c[r * ldc..r * ldc + n] {
                *x *= beta;
            }
        }
        return;
    }
    assert!(a.data.len() >= a.span(m, k), "gemm: lhs buffer too small");
    assert!(b.data.len() >= b.span(k, n), "gemm: rhs buffer too small");
    assert!(c.len() >= (m - 1) * ldc + n, "gemm: output buffer too small");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn add_componentwise() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn sub_self_is_zero() {
        let x = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut rng());
        assert_eq!(x.sub(&x).unwrap(), Tensor::zeros(&[3, 5]));
    }

    #[test]
    fn mul_matches_loop() {
        let mut r = rng();
        let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let got = a.mul(&b).unwrap();
        for i in 0..12 {
            assert_eq!(got.data()[i], a.data()[i] * b.data()[i]);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(a.matmul(&a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng());
        assert_eq!(Tensor::identity(3).matmul(&b).unwrap(), b);
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&ones).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng();
        let a = Tensor::uniform(&[5, 7], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[7, 3], -1.0, 1.0, &mut r);
        let got = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += a.data()[i * 7 + k] * b.data()[k * 3 + j];
                }
                assert!((got.data()[i * 3 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reshape_round_trip() {
        let x = Tensor::vector((1..=6).map(f64::from).collect());
        let y = x.reshape(&[2, 3]).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.reshape(&[6]).unwrap(), x);
        assert!(x.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn transpose_known_values() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = x.transpose(&[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(x.transpose(&[0, 0]).is_err());
        assert!(x.transpose(&[0]).is_err());
    }

    #[test]
    fn rank3_transpose_matches_index_oracle() {
        let x = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng());
        let t = x.transpose(&[2, 0, 1]).unwrap();
        assert_eq!(t.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(t.data()[c * 6 + a * 3 + b], x.data()[a * 12 + b * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn slice_rows_matches_copy() {
        let x = Tensor::from_fn(&[4, 4], |i| i as f64);
        let s = x.slice(0, 0..2).unwrap();
        let mut oracle = Vec::new();
        for r in 0..2 {
            for c in 0..4 {
                oracle.push(x.data()[r * 4 + c]);
            }
        }
        assert_eq!(s.data(), oracle.as_slice());
        let cols = x.slice(1, 1..3).unwrap();
        assert_eq!(cols.shape(), &[4, 2]);
        assert_eq!(cols.data()[..2], [1.0, 2.0]);
        assert!(x.slice(0, 3..5).is_err());
        assert!(x.slice(2, 0..1).is_err());
    }

    #[test]
    fn complex_rejects_mismatched_parts() {
        assert!(ComplexTensor::new(Tensor::zeros(&[2]), Tensor::zeros(&[3])).is_err());
    }
}
