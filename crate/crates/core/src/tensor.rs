//! Minimal dense math: row-major matrices, stable softmax, scaled dot-product
//! attention and rotary position encoding.
//!
//! Everything here is a pure function over slices so the model, the cache
//! engine and the oracle all share one numeric path.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Frequency base of the rotary encoding.
pub const ROPE_BASE: f64 = 10_000.0;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
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
            return Err(Error::InvalidShape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Row-vector product `x · W`, with `x.len() == rows`.
    pub fn vec_mul(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.rows {
            return Err(Error::InvalidShape(format!(
                "vector of length {} against {}x{} matrix",
                x.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![T::zero(); self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == T::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += xr * w;
            }
        }
        Ok(out)
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::InvalidShape(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * other.cols);
        for r in 0..self.rows {
            data.extend(other.vec_mul(self.row(r))?);
        }
        Ok(Matrix {
            rows: self.rows,
            cols: other.cols,
            data,
        })
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

/// Numerically stable softmax (max subtraction).
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::InvalidShape("softmax of an empty array".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `softmax(q·Kᵀ/√d) ` and the weighted sum of values.
///
/// Returns `(weights, output)`.
pub fn scaled_dot_attention<T, K, V>(q: &[T], keys: &[K], vals: &[V]) -> Result<(Vec<T>, Vec<T>)>
where
    T: Scalar,
    K: AsRef<[T]>,
    V: AsRef<[T]>,
{
    if keys.is_empty() {
        return Err(Error::EmptyCache);
    }
    if keys.len() != vals.len() {
        return Err(Error::InvalidShape(format!(
            "{} keys but {} values",
            keys.len(),
            vals.len()
        )));
    }
    let d = q.len();
    let scale = T::from_usize_lossy(d).sqrt();
    let mut logits = Vec::with_capacity(keys.len());
    for k in keys {
        let k = k.as_ref();
        if k.len() != d {
            return Err(Error::InvalidShape(format!(
                "key of length {} for query of length {d}",
                k.len()
            )));
        }
        logits.push(dot(q, k) / scale);
    }
    let weights = softmax(&logits)?;
    let mut out = vec![T::zero(); d];
    for (&w, v) in weights.iter().zip(vals) {
        let v = v.as_ref();
        if v.len() != d {
            return Err(Error::InvalidShape(format!(
                "value of length {} for query of length {d}",
                v.len()
            )));
        }
        for (o, &x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok((weights, out))
}

/// Rotary position encoding over interleaved pairs `(2i, 2i+1)`.
pub fn apply_rope<T: Scalar>(v: &[T], position: usize) -> Result<Vec<T>> {
    let d = v.len();
    if !d.is_multiple_of(2) {
        return Err(Error::InvalidShape(format!("rope needs an even dimension, got {d}")));
    }
    if position == 0 {
        return Ok(v.to_vec());
    }
    let mut out = Vec::with_capacity(d);
    for (i, pair) in v.chunks_exact(2).enumerate() {
        let freq = ROPE_BASE.powf(-((2 * i) as f64) / d as f64);
        let angle = position as f64 * freq;
        let (sin, cos) = (T::from_f64_lossy(angle.sin()), T::from_f64_lossy(angle.cos()));
        let (a, b) = (pair[0], pair[1]);
        out.push(a * cos - b * sin);
        out.push(a * sin + b * cos);
    }
    Ok(out)
}

/// Parameter-free RMS normalisation.
pub fn rms_norm<T: Scalar>(x: &[T]) -> Vec<T> {
    let eps = T::from_f64_lossy(1e-6);
    let mean_sq = x.iter().fold(T::zero(), |acc, &v| acc + v * v) / T::from_usize_lossy(x.len());
    let inv = (mean_sq + eps).sqrt().recip();
    x.iter().map(|&v| v * inv).collect()
}

pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: Scalar>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}
