//! Slice-level compute kernels shared by the autodiff graph and the
//! tape-free inference paths, so both produce identical arithmetic.

use alloc::vec;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub fn check_matmul(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::Shape(alloc::format!(
            "matmul {a:?} x {b:?}: inner dimensions disagree"
        )));
    }
    Ok(())
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            axpy(aik, &b[kk * n..(kk + 1) * n], orow);
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let mut bt = vec![T::zero(); k * n];
    transpose(&b[..n * k], n, k, &mut bt);
    matmul_acc(a, &bt, m, k, n, out);
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            axpy(aki, brow, &mut out[i * n..(i + 1) * n]);
        }
    }
}

pub fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn row_max<T: Scalar>(row: &[T]) -> T {
    row.iter().fold(T::neg_infinity(), |m, &x| m.max(x))
}

/// Numerically stable log-sum-exp of a slice; `-inf` for an all `-inf` row.
pub fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let m = row_max(row);
    if m == T::neg_infinity() {
        return m;
    }
    let s: T = row.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

pub fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let m = row_max(row);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    let inv = T::one() / s;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

pub fn log_softmax_inplace<T: Scalar>(row: &mut [T]) {
    let l = logsumexp(row);
    for x in row.iter_mut() {
        *x -= l;
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// RMS normalisation of one row; returns the inverse RMS used.
pub fn rmsnorm_row<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> T {
    let ms = dot(x, x) / T::from_f64(x.len() as f64);
    let inv = T::one() / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

/// Cosine/sine table for rotary embeddings: angle `pos * base^(-2i/head_dim)`.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    half: usize,
    cos: alloc::vec::Vec<T>,
    sin: alloc::vec::Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(head_dim: usize, base: f64, positions: usize) -> Self {
        use num_traits::Float;
        let half = head_dim / 2;
        let mut cos = alloc::vec::Vec::with_capacity(positions * half);
        let mut sin = alloc::vec::Vec::with_capacity(positions * half);
        for p in 0..positions {
            for i in 0..half {
                let theta = p as f64 * Float::powf(base, -2.0 * i as f64 / head_dim as f64);
                cos.push(T::from_f64(Float::cos(theta)));
                sin.push(T::from_f64(Float::sin(theta)));
            }
        }
        Self { half, cos, sin }
    }

    pub fn positions(&self) -> usize {
        if self.half == 0 {
            0
        } else {
            self.cos.len() / self.half
        }
    }

    /// Rotate channel pairs `(2i, 2i+1)` of every head in `row`; `inverse` undoes it.
    pub fn rotate(&self, row: &mut [T], pos: usize, inverse: bool) {
        let hd = 2 * self.half;
        let cos = &self.cos[pos * self.half..(pos + 1) * self.half];
        let sin = &self.sin[pos * self.half..(pos + 1) * self.half];
        for head in row.chunks_exact_mut(hd) {
            for i in 0..self.half {
                let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}
