//! Corpus BLEU-4 and token accuracy over token-id sequences.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// 0 to 100.
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[usize], n: usize) -> BTreeMap<&[usize], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_pairs(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Empty("no hypotheses to score".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Contract(alloc::format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// Corpus-level BLEU-4 with clipped n-gram counts and the standard brevity
/// penalty. Any zero precision gives 0 (no smoothing).
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<BleuReport> {
    check_pairs(hyps, refs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, &k) in &hc {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if total[n] == 0 { 0.0 } else { matched[n] as f64 / total[n] as f64 };
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c < r {
        Float::exp(1.0 - r as f64 / c as f64)
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|&p| Float::ln(p)).sum::<f64>() / 4.0;
        100.0 * brevity_penalty * Float::exp(log_mean)
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len: c,
        ref_len: r,
    })
}

/// Position-wise matches over the shorter length, summed over the corpus
/// and divided by the total reference length.
pub fn token_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    let mut hits = 0;
    let mut len = 0;
    for (h, r) in hyps.iter().zip(refs) {
        hits += h.iter().zip(r).filter(|(a, b)| a == b).count();
        len += r.len();
    }
    if len == 0 {
        return Err(Error::Empty("references hold no tokens".into()));
    }
    Ok(hits as f64 / len as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn identical_is_hundred() {
        let refs = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9]];
        let r = corpus_bleu(&refs, &refs).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(token_accuracy(&refs, &refs).unwrap(), 1.0);
    }

    #[test]
    fn short_hypothesis() {
        let r = corpus_bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 4, 5]]).unwrap();
        assert_eq!(r.precisions, [1.0; 4]);
        assert!((r.brevity_penalty - (-0.25f64).exp()).abs() < 1e-12);
        assert!((r.bleu - 77.8800783).abs() < 1e-6);
    }

    #[test]
    fn clipping_and_zero_precision() {
        // unigram "1" appears once in the reference: only one match counts
        let r = corpus_bleu(&[vec![1, 1, 1, 1]], &[vec![1, 2, 3, 4]]).unwrap();
        assert_eq!(r.precisions[0], 0.25);
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn empty_set_is_error() {
        assert!(corpus_bleu(&[], &[]).is_err());
        assert!(token_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(token_accuracy(&[vec![1, 2]], &[vec![3, 4]]).unwrap(), 0.0);
        // one deletion shifts the tail: only the first token lines up
        assert_eq!(token_accuracy(&[vec![5, 7, 8]], &[vec![5, 6, 7, 8]]).unwrap(), 0.25);
        assert_eq!(token_accuracy(&[vec![5, 6], vec![1]], &[vec![5, 6, 7], vec![2]]).unwrap(), 0.5);
    }
}
