//! Dense row-major kernels shared by the layer, the model and the trainer.
//!
//! Every reduction sums in index order. The batched products (`matmul_nt`,
//! `matmul_nn`) are written in axpy form so they vectorise while still
//! summing each output element in the same order as `matvec`, which keeps the
//! sequential and batched paths bitwise identical.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{FmError, Result};

/// Default epsilon inside every RMS normalisation.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl std::str::FromStr for Precision {
    type Err = FmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(FmError::InvalidArgument(format!("unknown precision {other:?}"))),
        }
    }
}

/// Scalar element type. Implemented for `f32` (`Single`) and `f64` (`Double`).
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + AddAssign + SubAssign + MulAssign + DivAssign + Sum + 'static
{
    const PRECISION: Precision;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Vectors are plain contiguous buffers.
pub type Vector<S> = Vec<S>;

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tensor2<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor2<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FmError::shape("Tensor2::from_vec", (rows, cols), data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(FmError::shape("Tensor2::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> Tensor2<T> {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        max_abs_diff(&self.data, &other.data)
    }
}

pub fn max_abs_diff<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_abs_diff on different lengths");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// `y += alpha * x`
#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `y += alpha * x`, accumulated in double precision.
#[inline]
pub fn axpy_wide<S: Scalar>(alpha: f64, x: &[S], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi.as_f64();
    }
}

pub fn matvec<S: Scalar>(m: &Tensor2<S>, v: &[S]) -> Result<Vec<S>> {
    if v.len() != m.cols {
        return Err(FmError::shape("matvec", m.shape(), v.len()));
    }
    let mut out = vec![S::zero(); m.rows];
    matvec_into(m, v, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn matvec_into<S: Scalar>(m: &Tensor2<S>, v: &[S], out: &mut [S]) {
    debug_assert_eq!(v.len(), m.cols);
    debug_assert_eq!(out.len(), m.rows);
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(i), v);
    }
}

/// `X · Wᵀ` for `X: [t × c]`, `W: [r × c]`, giving `[t × r]`.
///
/// Row `t` of the result is bitwise equal to `matvec(W, X[t])`.
pub fn matmul_nt<S: Scalar>(x: &Tensor2<S>, w: &Tensor2<S>) -> Result<Tensor2<S>> {
    if x.cols != w.cols {
        return Err(FmError::shape("matmul_nt", x.shape(), w.shape()));
    }
    let wt = w.transpose();
    let mut out = Tensor2::zeros(x.rows, w.rows);
    for t in 0..x.rows {
        let xr = x.row(t);
        let orow = out.row_mut(t);
        for (j, &xv) in xr.iter().enumerate() {
            axpy(xv, wt.row(j), orow);
        }
    }
    Ok(out)
}

/// `X · W` for `X: [t × r]`, `W: [r × c]`, giving `[t × c]`.
pub fn matmul_nn<S: Scalar>(x: &Tensor2<S>, w: &Tensor2<S>) -> Result<Tensor2<S>> {
    if x.cols != w.rows {
        return Err(FmError::shape("matmul_nn", x.shape(), w.shape()));
    }
    let mut out = Tensor2::zeros(x.rows, w.cols);
    for t in 0..x.rows {
        let xr = x.row(t);
        let orow = out.row_mut(t);
        for (i, &xv) in xr.iter().enumerate() {
            axpy(xv, w.row(i), orow);
        }
    }
    Ok(out)
}

/// `X · w` for a single weight vector: one dot product per row.
pub fn rows_dot<S: Scalar>(x: &Tensor2<S>, w: &[S]) -> Result<Vec<S>> {
    if x.cols != w.len() {
        return Err(FmError::shape("rows_dot", x.shape(), w.len()));
    }
    Ok((0..x.rows).map(|t| dot(x.row(t), w)).collect())
}

/// `grad[r × c] += Gᵀ · X` for `G: [t × r]`, `X: [t × c]`, in double precision.
pub fn accumulate_outer<S: Scalar>(grad: &mut [f64], g: &Tensor2<S>, x: &Tensor2<S>) {
    assert_eq!(g.rows, x.rows, "accumulate_outer: time dims differ");
    assert_eq!(grad.len(), g.cols * x.cols, "accumulate_outer: grad buffer");
    let c = x.cols;
    for t in 0..g.rows {
        let xr = x.row(t);
        for (i, &gv) in g.row(t).iter().enumerate() {
            if gv == S::zero() {
                continue;
            }
            axpy_wide(gv.as_f64(), xr, &mut grad[i * c..(i + 1) * c]);
        }
    }
}

/// Temperature softmax with max-subtraction.
pub fn softmax<S: Scalar>(z: &[S], tau: S) -> Result<Vec<S>> {
    if z.is_empty() {
        return Err(FmError::InvalidArgument("softmax of an empty vector".into()));
    }
    if !(tau > S::zero()) {
        return Err(FmError::InvalidArgument(format!(
            "softmax temperature must be > 0, got {tau}"
        )));
    }
    let mut out = vec![S::zero(); z.len()];
    softmax_into(z, tau, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn softmax_into<S: Scalar>(z: &[S], tau: S, out: &mut [S]) {
    let mut c = S::neg_infinity();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v / tau;
        if *o > c {
            c = *o;
        }
    }
    let mut sum = S::zero();
    for o in out.iter_mut() {
        *o = (*o - c).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(z: S) -> S {
    S::one() / (S::one() + (-z).exp())
}

#[inline]
pub fn silu<S: Scalar>(z: S) -> S {
    z * sigmoid(z)
}

#[inline]
pub fn silu_grad<S: Scalar>(z: S) -> S {
    let s = sigmoid(z);
    s * (S::one() + z * (S::one() - s))
}

/// `sqrt(mean(v²) + eps)`
#[inline]
pub fn rms<S: Scalar>(v: &[S], eps: S) -> S {
    let mut ss = S::zero();
    for &x in v {
        ss += x * x;
    }
    (ss / S::of(v.len() as f64) + eps).sqrt()
}

pub fn rms_norm_row<S: Scalar>(v: &[S], eps: S) -> Vec<S> {
    let mut out = vec![S::zero(); v.len()];
    rms_norm_into(v, eps, &mut out);
    out
}

/// Writes the normalised row into `out` and returns the rms it divided by.
#[inline]
pub(crate) fn rms_norm_into<S: Scalar>(v: &[S], eps: S, out: &mut [S]) -> S {
    let r = rms(v, eps);
    if r == S::zero() {
        out.iter_mut().for_each(|o| *o = S::zero());
        return r;
    }
    for (o, &x) in out.iter_mut().zip(v) {
        *o = x / r;
    }
    r
}

/// Backward of `n = v / rms(v)` given `n`, the rms and the upstream gradient.
/// Adds the input gradient into `g_v`.
#[inline]
pub(crate) fn rms_norm_backward<S: Scalar>(n: &[S], r: S, g_n: &[S], g_v: &mut [S]) {
    if r == S::zero() {
        return;
    }
    let d = S::of(n.len() as f64);
    let proj = dot(g_n, n) / d;
    for ((gv, &gn), &nv) in g_v.iter_mut().zip(g_n).zip(n) {
        *gv += (gn - nv * proj) / r;
    }
}

/// Natural log of `Σ exp(z)`, stable.
pub fn log_sum_exp<S: Scalar>(z: &[S]) -> S {
    let c = z.iter().copied().fold(S::neg_infinity(), S::max);
    let mut s = S::zero();
    for &v in z {
        s += (v - c).exp();
    }
    c + s.ln()
}
