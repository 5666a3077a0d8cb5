//! Beam search over any next-token scorer.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Source of next-token log-probabilities for a growing hypothesis.
pub trait Scorer {
    type State: Clone;

    /// Log-scores of every vocabulary entry following `tokens`.
    fn next_scores(&mut self, state: &Self::State, tokens: &[usize]) -> Result<Vec<f64>>;

    /// State after appending `token` to `tokens`.
    fn advance(&mut self, state: &Self::State, tokens: &[usize], token: usize) -> Result<Self::State>;
}

#[derive(Debug, Clone)]
pub struct Hypothesis<S> {
    pub tokens: Vec<usize>,
    /// Cumulative log-score.
    pub score: f64,
    pub finished: bool,
    pub state: S,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Hypotheses ending in this token are finished; `None` means every
    /// hypothesis runs to `max_len`.
    pub eos: Option<usize>,
    /// Final ranking uses `score / len^length_penalty`; 0 disables it.
    pub length_penalty: f64,
}

impl BeamConfig {
    pub fn new(beam: usize, max_len: usize, eos: Option<usize>) -> Self {
        Self {
            beam,
            max_len,
            eos,
            length_penalty: 0.0,
        }
    }

    fn rank_score<S>(&self, h: &Hypothesis<S>) -> f64 {
        if self.length_penalty == 0.0 {
            h.score
        } else {
            h.score / libm_pow(h.tokens.len().max(1) as f64, self.length_penalty)
        }
    }
}

fn libm_pow(x: f64, y: f64) -> f64 {
    num_traits::Float::powf(x, y)
}

/// Orders by descending score, ties by token sequence (lowest ids first).
fn better<S>(a: &Hypothesis<S>, b: &Hypothesis<S>, key: impl Fn(&Hypothesis<S>) -> f64) -> core::cmp::Ordering {
    key(b).total_cmp(&key(a)).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Expand every live hypothesis by the full vocabulary, keep the `beam`
/// best by cumulative score, move EOS-terminated ones to the finished pool.
/// Stops at `max_len` or once `beam` hypotheses are finished and no live
/// one scores above the worst of them. Returns up to `beam` hypotheses,
/// finished ones first padded with the best live ones, sorted by score.
pub fn beam_search<S: Scorer>(scorer: &mut S, init: S::State, cfg: BeamConfig) -> Result<Vec<Hypothesis<S::State>>> {
    if cfg.beam == 0 || cfg.max_len == 0 {
        return Err(Error::Config("beam and max_len must be at least 1".into()));
    }
    let mut live = alloc::vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
        state: init,
    }];
    let mut finished: Vec<Hypothesis<S::State>> = Vec::new();
    for _ in 0..cfg.max_len {
        // (score, token, parent)
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, h) in live.iter().enumerate() {
            let scores = scorer.next_scores(&h.state, &h.tokens)?;
            for (tok, &s) in scores.iter().enumerate() {
                if s.is_nan() {
                    return Err(Error::NonFinite(format!(
                        "scorer produced NaN for token {tok} after {:?}",
                        h.tokens
                    )));
                }
                if s == f64::NEG_INFINITY {
                    continue;
                }
                cands.push((h.score + s, tok, hi));
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| live[a.2].tokens.cmp(&live[b.2].tokens))
                .then(a.1.cmp(&b.1))
        });
        cands.truncate(cfg.beam);
        let mut next = Vec::with_capacity(cands.len());
        for (score, tok, hi) in cands {
            let parent = &live[hi];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            if Some(tok) == cfg.eos {
                finished.push(Hypothesis {
                    tokens,
                    score,
                    finished: true,
                    state: parent.state.clone(),
                });
            } else {
                let state = scorer.advance(&parent.state, &parent.tokens, tok)?;
                next.push(Hypothesis {
                    tokens,
                    score,
                    finished: false,
                    state,
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if finished.len() >= cfg.beam {
            let worst = finished.iter().map(|h| h.score).fold(f64::INFINITY, f64::min);
            let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_live <= worst {
                break;
            }
        }
    }
    finished.sort_by(|a, b| better(a, b, |h| cfg.rank_score(h)));
    finished.truncate(cfg.beam);
    if finished.len() < cfg.beam {
        live.sort_by(|a, b| better(a, b, |h| cfg.rank_score(h)));
        let need = cfg.beam - finished.len();
        finished.extend(live.into_iter().take(need));
    }
    finished.sort_by(|a, b| better(a, b, |h| cfg.rank_score(h)));
    Ok(finished)
}

/// Scorer backed by a fixed function of the prefix; handy for tests and
/// toy models.
pub struct FnScorer<F>(pub F);

impl<F: FnMut(&[usize]) -> Vec<f64>> Scorer for FnScorer<F> {
    type State = ();

    fn next_scores(&mut self, _: &(), tokens: &[usize]) -> Result<Vec<f64>> {
        Ok((self.0)(tokens))
    }

    fn advance(&mut self, _: &(), _: &[usize], _: usize) -> Result<()> {
        Ok(())
    }
}

/// Greedy argmax decoding (ties to the lowest id) up to `max_len` tokens.
pub fn greedy<S: Scorer>(scorer: &mut S, init: S::State, max_len: usize, eos: Option<usize>) -> Result<(Vec<usize>, f64)> {
    let mut tokens = Vec::new();
    let mut state = init;
    let mut score = 0.0;
    for _ in 0..max_len {
        let s = scorer.next_scores(&state, &tokens)?;
        let mut best = 0;
        for (i, &x) in s.iter().enumerate() {
            if x.is_nan() {
                return Err(Error::NonFinite("scorer produced NaN".into()));
            }
            if x > s[best] {
                best = i;
            }
        }
        score += s[best];
        if Some(best) == eos {
            tokens.push(best);
            break;
        }
        state = scorer.advance(&state, &tokens, best)?;
        tokens.push(best);
    }
    Ok((tokens, score))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_token_exhaustive() {
        // position 0: p(0)=0.6 p(1)=0.4; position 1 depends on the first token
        let table = |t: &[usize]| -> Vec<f64> {
            match t {
                [] => alloc::vec![0.6f64.ln(), 0.4f64.ln()],
                [0] => alloc::vec![0.5f64.ln(), 0.5f64.ln()],
                _ => alloc::vec![0.9f64.ln(), 0.1f64.ln()],
            }
        };
        let out = beam_search(&mut FnScorer(table), (), BeamConfig::new(2, 2, None)).unwrap();
        // exhaustive: [1,0]=.36, [0,0]=.30, [0,1]=.30, [1,1]=.04
        assert_eq!(out[0].tokens, alloc::vec![1, 0]);
        assert_eq!(out[1].tokens, alloc::vec![0, 0]);
        assert!((out[0].score - 0.36f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn beam_one_is_greedy() {
        let f = |t: &[usize]| -> Vec<f64> {
            let k = t.len() as f64;
            alloc::vec![-1.0 - k, -0.5 * k, -2.0, -0.7]
        };
        let b = beam_search(&mut FnScorer(f), (), BeamConfig::new(1, 5, Some(2))).unwrap();
        let g = greedy(&mut FnScorer(f), (), 5, Some(2)).unwrap();
        assert_eq!(b[0].tokens, g.0);
        assert!((b[0].score - g.1).abs() < 1e-12);
    }

    #[test]
    fn equal_scores_order_by_token_id() {
        let f = |_: &[usize]| alloc::vec![-1.0, -1.0, -1.0];
        let out = beam_search(&mut FnScorer(f), (), BeamConfig::new(3, 1, None)).unwrap();
        let toks: Vec<_> = out.iter().map(|h| h.tokens[0]).collect();
        assert_eq!(toks, alloc::vec![0, 1, 2]);
    }

    #[test]
    fn nan_aborts() {
        let f = |_: &[usize]| alloc::vec![f64::NAN, -1.0];
        assert!(matches!(
            beam_search(&mut FnScorer(f), (), BeamConfig::new(2, 2, None)),
            Err(Error::NonFinite(_))
        ));
    }
}
