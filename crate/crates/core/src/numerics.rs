//! Dense linear algebra helpers, log-space softmax and a central-difference
//! gradient oracle.
//!
//! Attention weights with multiplicative retention factors are always formed
//! as `exp(z + log r - max)`: a factor like `beta^(t - i)` underflows long
//! before its logarithm does.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default step for [`finite_diff_grad`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a `0 x cols` matrix.
    pub fn from_rows(rows: &[Vec<T>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
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
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::Shape(format!(
                "row of length {} pushed into matrix with {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self^T * y`.
    pub fn matvec_t(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != T::zero() {
                axpy(yr, self.row(r), &mut out);
            }
        }
        out
    }

    /// `self += scale * a b^T`.
    pub fn add_outer(&mut self, scale: T, a: &[T], b: &[T]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            if s != T::zero() {
                axpy(s, b, self.row_mut(r));
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `y += a * x`.
#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// Logistic sigmoid, evaluated without overflow for either sign.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(sigmoid(x))`, finite for every finite `x`.
#[inline]
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Log-weight of a geometric retention factor `beta^age`, with `0^0 = 1`.
#[inline]
pub fn retention_log_weight<T: Scalar>(beta: T, age: usize) -> T {
    if age == 0 {
        T::zero()
    } else {
        T::from_usize_lossy(age) * beta.ln()
    }
}

/// `beta^age` with the `0^0 = 1` convention.
#[inline]
pub fn retention_factor<T: Scalar>(beta: T, age: usize) -> T {
    if age == 0 {
        T::one()
    } else {
        beta.powi(age.min(i32::MAX as usize) as i32)
    }
}

/// `log(sum(exp(xs)))`. Returns `-inf` for an empty slice or all `-inf` input.
pub fn logsumexp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Plain softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    let zeros = vec![T::zero(); logits.len()];
    softmax_log_space(logits, &zeros)
}

/// Softmax of `logits` with multiplicative weights given by their logarithms:
/// `out_i = w_i e^{z_i} / sum_j w_j e^{z_j}` computed as `exp(z_i + log w_i - max)`.
///
/// Entries whose log-weight is `-inf` come out exactly zero.
pub fn softmax_log_space<T: Scalar>(logits: &[T], log_weights: &[T]) -> Result<Vec<T>> {
    if logits.len() != log_weights.len() {
        return Err(Error::Shape(format!(
            "{} logits vs {} log-weights",
            logits.len(),
            log_weights.len()
        )));
    }
    let mut combined = Vec::with_capacity(logits.len());
    for (&z, &lw) in logits.iter().zip(log_weights) {
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("logit {z}")));
        }
        if lw.is_nan() || lw > T::zero() {
            return Err(Error::InvalidArgument(format!("log-weight {lw} not in [-inf, 0]")));
        }
        combined.push(z + lw);
    }
    let m = combined.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return Err(Error::EmptySupport);
    }
    let mut total = T::zero();
    for c in combined.iter_mut() {
        *c = if *c == T::neg_infinity() { T::zero() } else { (*c - m).exp() };
        total = total + *c;
    }
    for c in combined.iter_mut() {
        *c = *c / total;
    }
    Ok(combined)
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&[T]) -> T, x: &[T], h: T) -> Result<Vec<T>> {
    let two_h = h + h;
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("f evaluation near coordinate {i}")));
        }
        grad.push((plus - minus) / two_h);
    }
    Ok(grad)
}

/// Total-variation distance between two probability vectors.
pub fn total_variation<T: Scalar>(p: &[T], q: &[T]) -> T {
    let s: T = p.iter().zip(q).map(|(&a, &b)| (a - b).abs()).sum();
    s / T::lit(2.0)
}
