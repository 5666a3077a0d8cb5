//! Multi-head scaled dot-product attention over packed variable-length
//! sequences.
//!
//! Rows of `q`, `k` and `v` are `heads * head_dim` wide; each segment names
//! a contiguous block of query rows and the block of key/value rows it reads.

use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::dot;
use crate::mask::AttentionMask;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
    /// Position of the first query row inside the key sequence (non-zero
    /// when decoding incrementally against a cache).
    pub q_offset: usize,
    pub mask: AttentionMask,
}

impl AttnSegment {
    pub fn self_attn(start: usize, len: usize, mask: AttentionMask) -> Self {
        Self {
            q_start: start,
            q_len: len,
            kv_start: start,
            kv_len: len,
            q_offset: 0,
            mask,
        }
    }

    pub fn cross(q_start: usize, q_len: usize, kv_start: usize, kv_len: usize) -> Self {
        Self {
            q_start,
            q_len,
            kv_start,
            kv_len,
            q_offset: 0,
            mask: AttentionMask::Full,
        }
    }

    fn probs_len(&self, heads: usize) -> usize {
        heads * self.q_len * self.kv_len
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Forward pass. Returns the output rows and the attention probabilities
/// (per segment, per head, `q_len x kv_len`) needed for the backward pass.
pub fn forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    q_rows: usize,
    segs: &[AttnSegment],
    dims: AttnDims,
) -> (Vec<T>, Vec<T>) {
    let w = dims.width();
    let dh = dims.head_dim;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut out = vec![T::zero(); q_rows * w];
    let total: usize = segs.iter().map(|s| s.probs_len(dims.heads)).sum();
    let mut probs = vec![T::zero(); total];
    let mut base = 0;
    for seg in segs {
        for h in 0..dims.heads {
            let ho = h * dh;
            for r in 0..seg.q_len {
                let qi = seg.q_start + r;
                let qrow = &q[qi * w + ho..qi * w + ho + dh];
                let prow = &mut probs[base + (h * seg.q_len + r) * seg.kv_len..][..seg.kv_len];
                let mut m = T::neg_infinity();
                for (j, p) in prow.iter_mut().enumerate() {
                    if seg.mask.allows(seg.q_offset + r, j) {
                        let kj = seg.kv_start + j;
                        let sc = dot(qrow, &k[kj * w + ho..kj * w + ho + dh]) * scale;
                        *p = sc;
                        m = m.max(sc);
                    } else {
                        *p = T::neg_infinity();
                    }
                }
                let mut sum = T::zero();
                for p in prow.iter_mut() {
                    *p = if *p == T::neg_infinity() {
                        T::zero()
                    } else {
                        (*p - m).exp()
                    };
                    sum += *p;
                }
                let inv = T::one() / sum;
                let orow = &mut out[qi * w + ho..qi * w + ho + dh];
                for (j, p) in prow.iter_mut().enumerate() {
                    *p *= inv;
                    if *p != T::zero() {
                        let kj = seg.kv_start + j;
                        let vrow = &v[kj * w + ho..kj * w + ho + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += *p * vv;
                        }
                    }
                }
            }
        }
        base += seg.probs_len(dims.heads);
    }
    (out, probs)
}

/// Backward pass; accumulates into whichever of `dq`, `dk`, `dv` are given.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    segs: &[AttnSegment],
    dims: AttnDims,
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv: Option<&mut [T]>,
) {
    let w = dims.width();
    let dh = dims.head_dim;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut base = 0;
    let mut ds = Vec::new();
    for seg in segs {
        ds.clear();
        ds.resize(seg.kv_len, T::zero());
        for h in 0..dims.heads {
            let ho = h * dh;
            for r in 0..seg.q_len {
                let qi = seg.q_start + r;
                let prow = &probs[base + (h * seg.q_len + r) * seg.kv_len..][..seg.kv_len];
                let dorow = &dout[qi * w + ho..qi * w + ho + dh];
                let mut weighted = T::zero();
                for (j, &p) in prow.iter().enumerate() {
                    if p == T::zero() {
                        ds[j] = T::zero();
                        continue;
                    }
                    let kj = seg.kv_start + j;
                    let dp = dot(dorow, &v[kj * w + ho..kj * w + ho + dh]);
                    ds[j] = dp;
                    weighted += p * dp;
                    if let Some(dv) = dv.as_deref_mut() {
                        for (o, &g) in dv[kj * w + ho..kj * w + ho + dh].iter_mut().zip(dorow) {
                            *o += p * g;
                        }
                    }
                }
                for (j, &p) in prow.iter().enumerate() {
                    if p == T::zero() {
                        continue;
                    }
                    let g = p * (ds[j] - weighted) * scale;
                    let kj = seg.kv_start + j;
                    if let Some(dq) = dq.as_deref_mut() {
                        let krow = &k[kj * w + ho..kj * w + ho + dh];
                        for (o, &kv) in dq[qi * w + ho..qi * w + ho + dh].iter_mut().zip(krow) {
                            *o += g * kv;
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        let qrow = &q[qi * w + ho..qi * w + ho + dh];
                        for (o, &qv) in dk[kj * w + ho..kj * w + ho + dh].iter_mut().zip(qrow) {
                            *o += g * qv;
                        }
                    }
                }
            }
        }
        base += seg.probs_len(dims.heads);
    }
}
