//! Text documents for pretraining the language model.
//!
//! Two kinds are mixed. Plain documents are `BOS t1..tn EOS` over target
//! tokens. Instruction documents put a prompt and a content block in front
//! of the content read backwards, `prompt ⊕ c ⊕ BOS ⊕ reverse(c) ⊕ EOS`,
//! where the content block may carry filler tokens that the answer skips.

use alloc::vec::Vec;

use rand::Rng;

use crate::bridge::{PromptTemplate, Vocab, BOS, EOS, PAD, TEMPLATES};
use crate::error::{Error, Result};

pub const MAX_COPIES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmDataConfig {
    /// Share of instruction documents.
    pub instruction_fraction: f64,
    /// Chance of a filler after each content token.
    pub filler_prob: f64,
    /// Chance of each further copy of a content token, so copies come in
    /// geometric runs (at most `MAX_COPIES`); the answer skips the extras
    /// like fillers.
    pub repeat_prob: f64,
    pub length_range: (usize, usize),
}

impl Default for LmDataConfig {
    fn default() -> Self {
        Self {
            instruction_fraction: 0.5,
            filler_prob: 0.5,
            repeat_prob: 0.0,
            length_range: (3, 12),
        }
    }
}

impl LmDataConfig {
    pub fn validate(&self) -> Result<()> {
        let p = [self.instruction_fraction, self.filler_prob, self.repeat_prob];
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Config("LM data probabilities must lie in [0, 1]".into()));
        }
        if self.length_range.0 == 0 || self.length_range.0 > self.length_range.1 {
            return Err(Error::Config("LM document length range must be 1 <= min <= max".into()));
        }
        Ok(())
    }
}

fn content<R: Rng + ?Sized>(vocab: &Vocab, cfg: &LmDataConfig, rng: &mut R) -> Vec<usize> {
    let n = rng.random_range(cfg.length_range.0..=cfg.length_range.1);
    (0..n)
        .map(|_| vocab.target_base() + rng.random_range(0..vocab.target_vocab_size - 1))
        .collect()
}

/// One document in model-vocabulary ids.
pub fn sample_document<R: Rng + ?Sized>(vocab: &Vocab, cfg: &LmDataConfig, rng: &mut R) -> Vec<usize> {
    let words = content(vocab, cfg, rng);
    if !rng.random_bool(cfg.instruction_fraction) {
        let mut doc = Vec::with_capacity(words.len() + 2);
        doc.push(BOS);
        doc.extend_from_slice(&words);
        doc.push(EOS);
        return doc;
    }
    let template = PromptTemplate {
        index: rng.random_range(0..TEMPLATES.len()),
    };
    let language = rng.random_range(0..vocab.num_languages);
    let mut doc = template.tokens(vocab, language);
    if rng.random_bool(cfg.filler_prob) {
        doc.push(PAD);
    }
    for &w in &words {
        doc.push(w);
        for _ in 1..MAX_COPIES {
            if !rng.random_bool(cfg.repeat_prob) {
                break;
            }
            doc.push(w);
        }
        if rng.random_bool(cfg.filler_prob) {
            doc.push(PAD);
        }
    }
    doc.push(BOS);
    doc.extend(words.iter().rev());
    doc.push(EOS);
    doc
}
