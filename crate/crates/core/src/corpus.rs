//! Synthetic speech-translation corpus with exactly known ground truth.
//!
//! Each language owns a Gaussian codebook (one feature row per source token)
//! and a token cipher. An utterance repeats each source token's codebook row
//! for a random duration and adds Gaussian noise; its translation is the
//! ciphered source read backwards. Id 0 is reserved in every vocabulary.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Vocabulary size including the reserved id 0.
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub feature_dim: usize,
    /// Inclusive range of frames per source token.
    pub duration_range: (usize, usize),
    pub noise_sigma: f64,
    /// Inclusive range of source tokens per utterance.
    pub utterance_length_range: (usize, usize),
    pub seed: u64,
    pub num_languages: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            source_vocab_size: 32,
            target_vocab_size: 32,
            feature_dim: 16,
            duration_range: (2, 6),
            noise_sigma: 0.1,
            utterance_length_range: (3, 12),
            seed: 0,
            num_languages: 2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.source_vocab_size < 2 || self.target_vocab_size < 2 || self.feature_dim < 1 {
            return bad("vocabulary sizes must be at least 2 and feature_dim at least 1");
        }
        if self.source_vocab_size != self.target_vocab_size {
            return bad("the token cipher needs equal source and target vocabulary sizes");
        }
        let (dmin, dmax) = self.duration_range;
        if dmin < 1 || dmax < dmin {
            return bad("duration_range must satisfy 1 <= d_min <= d_max");
        }
        let (lmin, lmax) = self.utterance_length_range;
        if lmin < 1 || lmax < lmin {
            return bad("utterance_length_range must satisfy 1 <= min <= max");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be finite and non-negative");
        }
        if self.num_languages < 1 {
            return bad("num_languages must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusExample {
    pub id: String,
    pub language_id: usize,
    pub source_tokens: Vec<usize>,
    pub target_tokens: Vec<usize>,
    /// `frames x feature_dim`.
    pub features: Tensor<f32>,
}

impl CorpusExample {
    pub fn num_frames(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Per-language codebook and cipher.
#[derive(Debug, Clone, PartialEq)]
pub struct Language {
    /// Row `t` is the feature prototype of source token `t`; row 0 unused.
    pub codebook: Tensor<f32>,
    /// `cipher[s]` is the target token for source token `s`; `cipher[0] = 0`.
    pub cipher: Vec<usize>,
}

impl Language {
    pub fn translate(&self, source: &[usize]) -> Vec<usize> {
        source.iter().rev().map(|&s| self.cipher[s]).collect()
    }

    /// Inverse of [`Language::translate`].
    pub fn back_translate(&self, target: &[usize]) -> Vec<usize> {
        let mut inv = alloc::vec![0; self.cipher.len()];
        for (s, &t) in self.cipher.iter().enumerate() {
            inv[t] = s;
        }
        target.iter().rev().map(|&t| inv[t]).collect()
    }
}

/// Stream id for language tables, kept apart from per-example streams.
const LANGUAGE_STREAM: u64 = 1 << 63;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Deterministic corpus generator: every example is a pure function of the
/// config and its index.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub languages: Vec<Language>,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let languages = (0..config.num_languages)
            .map(|l| {
                let mut rng = stream_rng(config.seed, LANGUAGE_STREAM + l as u64);
                let codebook = Tensor::randn(&[config.source_vocab_size, config.feature_dim], 1.0, &mut rng);
                let mut perm: Vec<usize> = (1..config.target_vocab_size).collect();
                perm.shuffle(&mut rng);
                let mut cipher = alloc::vec![0];
                cipher.extend(perm);
                Language { codebook, cipher }
            })
            .collect();
        Ok(Self { config, languages })
    }

    /// Example number `index`; languages alternate by index.
    pub fn example(&self, index: u64) -> CorpusExample {
        let language_id = (index % self.languages.len() as u64) as usize;
        let mut rng = stream_rng(self.config.seed, index);
        let mut ex = generate_example(&self.config, &self.languages[language_id], language_id, &mut rng);
        ex.id = format!("utt{index:06}");
        ex
    }

    pub fn examples(&self, range: core::ops::Range<u64>) -> Vec<CorpusExample> {
        range.map(|i| self.example(i)).collect()
    }
}

/// Source tokens and per-token durations of one utterance.
pub fn sample_utterance<R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let (lmin, lmax) = config.utterance_length_range;
    let (dmin, dmax) = config.duration_range;
    let n = rng.random_range(lmin..=lmax);
    let source: Vec<usize> = (0..n).map(|_| rng.random_range(1..config.source_vocab_size)).collect();
    let durations = (0..n).map(|_| rng.random_range(dmin..=dmax)).collect();
    (source, durations)
}

/// Render one utterance of `language`: tokens, durations, then noisy frames.
pub fn generate_example<R: Rng + ?Sized>(
    config: &GeneratorConfig,
    language: &Language,
    language_id: usize,
    rng: &mut R,
) -> CorpusExample {
    let (source, durations) = sample_utterance(config, rng);
    let features = render(config, language, &source, &durations, rng);
    CorpusExample {
        id: String::new(),
        language_id,
        target_tokens: language.translate(&source),
        source_tokens: source,
        features,
    }
}

/// Frames for a token/duration sequence: codebook rows plus N(0, sigma^2).
pub fn render<R: Rng + ?Sized>(
    config: &GeneratorConfig,
    language: &Language,
    source: &[usize],
    durations: &[usize],
    rng: &mut R,
) -> Tensor<f32> {
    let f = config.feature_dim;
    let frames: usize = durations.iter().sum();
    let mut data = Vec::with_capacity(frames * f);
    for (&t, &d) in source.iter().zip(durations) {
        let proto = language.codebook.row(t);
        for _ in 0..d {
            for &p in proto {
                let z: f64 = StandardNormal.sample(rng);
                data.push(p + (z * config.noise_sigma) as f32);
            }
        }
    }
    Tensor::from_parts(alloc::vec![frames, f], data)
}
