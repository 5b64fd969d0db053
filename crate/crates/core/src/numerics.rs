//! Dense row-major tensors and the handful of differentiable kernels the
//! learner is built from. Every kernel checks its output for NaN/Inf and
//! reports a [`Error::NumericFault`] instead of propagating it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point precision of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" | "f32" => Some(Precision::Single),
            "double" | "f64" => Some(Precision::Double),
            _ => None,
        }
    }
}

/// Scalar type used for parameters and activations.
pub trait Real:
    Float
    + Default
    + fmt::Debug
    + fmt::Display
    + fmt::LowerExp
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;
    /// Significant decimal digits needed for an exact text round trip.
    const ROUND_TRIP_DIGITS: usize;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;
    const ROUND_TRIP_DIGITS: usize = 9;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;
    const ROUND_TRIP_DIGITS: usize = 17;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor from caller data, rejecting bad shapes and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", format!("dimensions must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite value in tensor of shape {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Passes the tensor through if every element is finite.
    pub fn finite_or_fault(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NumericFault { op })
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    /// Sum of elementwise products, accumulated in double precision.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }
}

/// `a × b` for `a: [m×k]`, `b: [k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner dimensions {k} and {k2} differ")));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    Tensor { shape: vec![m, n], data: out }.finite_or_fault("matmul")
}

/// `aᵀ × b` for `a: [k×m]`, `b: [k×n]`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2("matmul_tn")?;
    let (k2, n) = b.dims2("matmul_tn")?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", format!("row counts {k} and {k2} differ")));
    }
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let a_row = &a.data[p * m..(p + 1) * m];
        let b_row = &b.data[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let o_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_pj) in o_row.iter_mut().zip(b_row) {
                *o += a_pi * b_pj;
            }
        }
    }
    Tensor { shape: vec![m, n], data: out }.finite_or_fault("matmul_tn")
}

/// `a × bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (n, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", format!("column counts {k} and {k2} differ")));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor { shape: vec![m, n], data: out }.finite_or_fault("matmul_nt")
}

fn check_bias<T: Real>(op: &'static str, w: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let out = w.cols();
    if b.len() != out {
        return Err(Error::shape(op, format!("bias has {} entries, weight has {out} columns", b.len())));
    }
    Ok(())
}

/// `x w + b` with the bias broadcast over rows.
pub fn affine<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_bias("affine", w, b)?;
    let mut z = matmul(x, w)?;
    let n = z.cols();
    for row in z.data.chunks_mut(n) {
        for (v, &bias) in row.iter_mut().zip(&b.data) {
            *v += bias;
        }
    }
    z.finite_or_fault("affine")
}

/// `tanh(x w + b)`, elementwise.
pub fn affine_tanh<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_bias("affine_tanh", w, b)?;
    let mut z = affine(x, w, b)?;
    for v in z.data.iter_mut() {
        *v = v.tanh();
    }
    z.finite_or_fault("affine_tanh")
}

/// Gradients of a scalar loss with respect to the operands of an affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backward pass of [`affine`] given `∂loss/∂z`.
pub fn affine_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, grad_z: &Tensor<T>) -> Result<AffineGrads<T>> {
    let weight = matmul_tn(x, grad_z)?;
    let input = matmul_nt(grad_z, w)?;
    let n = grad_z.cols();
    let mut bias = vec![T::zero(); n];
    for row in grad_z.data.chunks(n) {
        for (b, &g) in bias.iter_mut().zip(row) {
            *b += g;
        }
    }
    let bias = Tensor { shape: vec![n], data: bias }.finite_or_fault("affine_backward")?;
    Ok(AffineGrads { input, weight, bias })
}

/// Backward pass of [`affine_tanh`]; `out` is the forward output.
pub fn affine_tanh_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    out: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<AffineGrads<T>> {
    if !out.same_shape(grad_out) {
        return Err(Error::shape(
            "affine_tanh_backward",
            format!("output {:?} vs gradient {:?}", out.shape, grad_out.shape),
        ));
    }
    let data = out.data.iter().zip(&grad_out.data).map(|(&y, &g)| g * (T::one() - y * y)).collect();
    let grad_z = Tensor { shape: out.shape.clone(), data };
    affine_backward(x, w, &grad_z)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = logits.dims2("softmax")?;
    let mut out = logits.data.clone();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor { shape: logits.shape.clone(), data: out }.finite_or_fault("softmax")
}

/// Mean negative log-likelihood of `labels` and its gradient `(softmax − onehot) / n`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, c) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{n} logit rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut grad = Vec::with_capacity(n * c);
    let mut total = T::zero();
    for (row, &y) in logits.data.chunks(c).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
        let log_z = max + sum.ln();
        total += log_z - row[y];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let target = if j == y { T::one() } else { T::zero() };
            grad.push((p - target) * inv_n);
        }
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::NumericFault { op: "softmax_cross_entropy" });
    }
    let grad = Tensor { shape: vec![n, c], data: grad }.finite_or_fault("softmax_cross_entropy")?;
    Ok((loss, grad))
}
