//! Connectionist temporal classification: loss, greedy alignment and the
//! two posterior-driven length-compression rules.
//!
//! Class 0 is the blank everywhere in this module.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

pub const BLANK: usize = 0;

#[inline]
fn lse2<T: Scalar>(a: T, b: T) -> T {
    let m = a.max(b);
    if m == T::neg_infinity() {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

#[inline]
fn lse3<T: Scalar>(a: T, b: T, c: T) -> T {
    let m = a.max(b).max(c);
    if m == T::neg_infinity() {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
    }
}

/// Number of adjacent equal labels; each forces an extra blank frame.
pub fn repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn check_feasible(frames: usize, classes: usize, target: &[usize]) -> Result<()> {
    if target.is_empty() {
        return Err(Error::Contract("CTC target must hold at least one label".into()));
    }
    if let Some(&bad) = target.iter().find(|&&t| t == BLANK || t >= classes) {
        return Err(Error::Contract(alloc::format!(
            "CTC target label {bad} is blank or outside {classes} classes"
        )));
    }
    let r = repeats(target);
    if frames < target.len() + r {
        return Err(Error::CtcInfeasible {
            frames,
            labels: target.len(),
            repeats: r,
        });
    }
    Ok(())
}

/// Forward-backward in log space. `lp` is `frames x classes`, row-major.
/// Returns the loss `-ln P(target)` and its gradient w.r.t. every entry of `lp`.
pub fn ctc_forward_backward<T: Scalar>(
    lp: &[T],
    frames: usize,
    classes: usize,
    target: &[usize],
) -> Result<(T, Vec<T>)> {
    check_feasible(frames, classes, target)?;
    let ext = extended(target);
    let s_len = ext.len();
    let ninf = T::neg_infinity();
    let at = |t: usize, c: usize| lp[t * classes + c];
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = at(0, ext[0]);
    alpha[1] = at(0, ext[1]);
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut v = prev[s];
            if s >= 1 {
                v = lse2(v, prev[s - 1]);
            }
            if skip_ok(s) {
                v = lse2(v, prev[s - 2]);
            }
            cur[s] = if v == ninf { ninf } else { v + at(t, ext[s]) };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = lse2(alpha[last + s_len - 1], alpha[last + s_len - 2]);
    if log_p == ninf {
        return Err(Error::CtcInfeasible {
            frames,
            labels: target.len(),
            repeats: repeats(target),
        });
    }

    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = T::zero();
    beta[last + s_len - 2] = T::zero();
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let nx = (t + 1) * s_len;
            let stay = beta[nx + s] + at(t + 1, ext[s]);
            let step = if s + 1 < s_len {
                beta[nx + s + 1] + at(t + 1, ext[s + 1])
            } else {
                ninf
            };
            let jump = if s + 2 < s_len && skip_ok(s + 2) {
                beta[nx + s + 2] + at(t + 1, ext[s + 2])
            } else {
                ninf
            };
            beta[t * s_len + s] = lse3(stay, step, jump);
        }
    }

    let mut grad = vec![T::zero(); frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let g = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if g != ninf {
                grad[t * classes + ext[s]] -= g.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in target {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// CTC loss of a `frames x classes` log-probability matrix.
pub fn ctc_loss<T: Scalar>(log_probs: &Tensor<T>, target: &[usize]) -> Result<T> {
    let (t, c) = log_probs.rows_cols();
    ctc_forward_backward(log_probs.data(), t, c, target).map(|(l, _)| l)
}

/// Per-frame argmax, ties broken toward the lowest class index.
pub fn greedy_alignment<T: Scalar>(log_probs: &Tensor<T>) -> Vec<usize> {
    let (_, c) = log_probs.rows_cols();
    log_probs
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate().skip(1) {
                if x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Collapse an alignment: merge repeats, drop blanks.
pub fn collapse(alignment: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &a in alignment {
        if Some(a) != prev && a != BLANK {
            out.push(a);
        }
        prev = Some(a);
    }
    out
}

/// Per-frame log-probabilities over labels plus blank, with the argmax path.
#[derive(Debug, Clone)]
pub struct CtcPosteriorgram<T> {
    pub log_probs: Tensor<T>,
    pub alignment: Vec<usize>,
}

impl<T: Scalar> CtcPosteriorgram<T> {
    /// Normalise raw logits row-wise and derive the alignment.
    pub fn from_logits(logits: &Tensor<T>) -> Self {
        let mut lp = logits.clone();
        let (_, c) = lp.rows_cols();
        for row in lp.data_mut().chunks_exact_mut(c) {
            kernels::log_softmax_inplace(row);
        }
        let alignment = greedy_alignment(&lp);
        Self {
            log_probs: lp,
            alignment,
        }
    }

    pub fn frames(&self) -> usize {
        self.alignment.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressionMode {
    BlankRemove,
    FrameAverage,
}

fn check_alignment<T: Scalar>(hidden: &Tensor<T>, alignment: &[usize]) -> Result<usize> {
    let (rows, cols) = hidden.rows_cols();
    if rows != alignment.len() {
        return Err(Error::Contract(alloc::format!(
            "alignment has {} frames, hidden has {rows}",
            alignment.len()
        )));
    }
    Ok(cols)
}

fn mean_rows<T: Scalar>(hidden: &Tensor<T>, rows: core::ops::Range<usize>, out: &mut Vec<T>) {
    let (_, d) = hidden.rows_cols();
    let start = out.len();
    out.resize(start + d, T::zero());
    let n = T::from_f64(rows.len() as f64);
    for r in rows {
        for (o, &x) in out[start..].iter_mut().zip(hidden.row(r)) {
            *o += x;
        }
    }
    for o in &mut out[start..] {
        *o /= n;
    }
}

/// Keep rows whose alignment is not blank. An all-blank utterance collapses
/// to a single mean row so the result is never empty.
pub fn compress_blank_remove<T: Scalar>(hidden: &Tensor<T>, alignment: &[usize]) -> Result<Tensor<T>> {
    let d = check_alignment(hidden, alignment)?;
    let keep: Vec<usize> = (0..alignment.len()).filter(|&i| alignment[i] != BLANK).collect();
    if keep.is_empty() {
        let mut data = Vec::with_capacity(d);
        mean_rows(hidden, 0..alignment.len(), &mut data);
        return Ok(Tensor::from_parts(vec![1, d], data));
    }
    Ok(hidden.gather_rows(&keep))
}

/// Maximal runs of equal alignment value, as half-open row ranges.
pub fn runs(alignment: &[usize]) -> Vec<(usize, core::ops::Range<usize>)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=alignment.len() {
        if i == alignment.len() || alignment[i] != alignment[start] {
            out.push((alignment[start], start..i));
            start = i;
        }
    }
    out
}

/// One output row per maximal run of equal predictions, holding the run's
/// mean. Blank runs are kept unless `drop_blank_runs` is set.
pub fn compress_frame_average<T: Scalar>(
    hidden: &Tensor<T>,
    alignment: &[usize],
    drop_blank_runs: bool,
) -> Result<Tensor<T>> {
    let d = check_alignment(hidden, alignment)?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (label, range) in runs(alignment) {
        if drop_blank_runs && label == BLANK {
            continue;
        }
        mean_rows(hidden, range, &mut data);
        rows += 1;
    }
    if rows == 0 {
        mean_rows(hidden, 0..alignment.len(), &mut data);
        rows = 1;
    }
    Ok(Tensor::from_parts(vec![rows, d], data))
}

pub fn compress<T: Scalar>(
    mode: CompressionMode,
    hidden: &Tensor<T>,
    alignment: &[usize],
    drop_blank_runs: bool,
) -> Result<Tensor<T>> {
    match mode {
        CompressionMode::BlankRemove => compress_blank_remove(hidden, alignment),
        CompressionMode::FrameAverage => compress_frame_average(hidden, alignment, drop_blank_runs),
    }
}
