//! Glue between acoustics and the language model: the shared token
//! vocabulary, prompt templates, the audio encoder, the convolutional
//! subsampler, the scratch frontend and prefix assembly.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::AttentionMask;
use crate::nn::{gaussian, Conv1dStack, ConvFrontend, Encoder, EncoderConfig, Linear, Span};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SOS: usize = 3;

/// Label value for positions that carry no loss.
pub const IGNORE: usize = usize::MAX;

/// Plain words used by the prompt templates, in id order after the specials.
pub const PROMPT_WORDS: [&str; 7] = ["audio", "=>", "English", "translate", "the", "into", "transcribe"];

/// Model vocabulary: specials, prompt words, one name token per source
/// language, then the target-language tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub num_languages: usize,
    /// Corpus target vocabulary size including its reserved id 0.
    pub target_vocab_size: usize,
}

impl Vocab {
    pub fn new(num_languages: usize, target_vocab_size: usize) -> Self {
        Self {
            num_languages,
            target_vocab_size,
        }
    }

    pub fn word(&self, w: &str) -> Option<usize> {
        PROMPT_WORDS.iter().position(|&p| p == w).map(|i| 4 + i)
    }

    pub fn language(&self, language_id: usize) -> usize {
        4 + PROMPT_WORDS.len() + language_id
    }

    /// Id of corpus target token 1.
    pub fn target_base(&self) -> usize {
        4 + PROMPT_WORDS.len() + self.num_languages
    }

    pub fn size(&self) -> usize {
        self.target_base() + self.target_vocab_size - 1
    }

    pub fn is_target(&self, id: usize) -> bool {
        id >= self.target_base() && id < self.size()
    }

    /// Corpus target tokens (ids >= 1) to model ids.
    pub fn encode_target(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|&t| {
                if t == 0 || t >= self.target_vocab_size {
                    Err(Error::Contract(format!("target token {t} outside 1..{}", self.target_vocab_size)))
                } else {
                    Ok(self.target_base() + t - 1)
                }
            })
            .collect()
    }

    /// Model ids back to corpus target tokens, stopping at the first EOS.
    /// Non-target ids map to 0, which never occurs in a reference.
    pub fn decode_target(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| if self.is_target(i) { i - self.target_base() + 1 } else { 0 })
            .collect()
    }

    /// Encoded targets followed by EOS.
    pub fn target_with_eos(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        let mut out = self.encode_target(tokens)?;
        out.push(EOS);
        Ok(out)
    }
}

/// Prompt templates; `[source]` is replaced by the language name token.
pub const TEMPLATES: [&str; 4] = [
    "audio => English",
    "translate the audio into English",
    "translate [source] audio into English",
    "transcribe the audio into English",
];

/// Index of the fixed evaluation prompt in [`TEMPLATES`].
pub const EVAL_TEMPLATE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub index: usize,
}

impl PromptTemplate {
    pub fn text(&self) -> &'static str {
        TEMPLATES[self.index]
    }

    pub fn has_source_slot(&self) -> bool {
        self.text().contains("[source]")
    }

    pub fn tokens(&self, vocab: &Vocab, language_id: usize) -> Vec<usize> {
        self.text()
            .split_whitespace()
            .map(|w| {
                if w == "[source]" {
                    vocab.language(language_id)
                } else {
                    vocab.word(w).unwrap_or(PAD)
                }
            })
            .collect()
    }
}

/// Uniform over all templates while training; the fixed one otherwise.
pub fn sample_prompt<R: Rng + ?Sized>(rng: &mut R, training: bool) -> PromptTemplate {
    if training {
        PromptTemplate {
            index: rng.random_range(0..TEMPLATES.len()),
        }
    } else {
        PromptTemplate { index: EVAL_TEMPLATE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskVariant {
    Causal,
    PrefixNonCausal,
}

/// Layout of `prompt ⊕ audio ⊕ separator ⊕ targets[..n-1]` with next-token
/// labels on the target positions only.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixAssembly {
    pub prompt: Vec<usize>,
    pub audio_len: usize,
    pub separator: Option<usize>,
    /// Target tokens fed as inputs (targets without the final EOS).
    pub tail: Vec<usize>,
    /// Per position: the token it must predict, or [`IGNORE`].
    pub labels: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub mask: AttentionMask,
}

impl PrefixAssembly {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows fed before generation starts (prompt, audio, separator).
    pub fn prefix_rows(&self) -> usize {
        self.prompt.len() + self.audio_len + usize::from(self.separator.is_some())
    }
}

pub fn assemble_prefix(
    prompt: &[usize],
    audio_len: usize,
    targets: &[usize],
    mask: MaskVariant,
    separator: Option<usize>,
) -> Result<PrefixAssembly> {
    if audio_len == 0 {
        return Err(Error::Contract("audio segment must hold at least one frame".into()));
    }
    if targets.last() != Some(&EOS) {
        return Err(Error::Contract("training targets must end with EOS".into()));
    }
    let n = targets.len();
    let sep = usize::from(separator.is_some());
    let total = prompt.len() + audio_len + sep + n - 1;
    let first = prompt.len() + audio_len + sep - 1;
    let mut labels = alloc::vec![IGNORE; total];
    labels[first..].copy_from_slice(targets);
    let loss_mask = labels.iter().map(|&l| l != IGNORE).collect();
    let mask = match mask {
        MaskVariant::Causal => AttentionMask::Causal,
        MaskVariant::PrefixNonCausal => AttentionMask::PrefixNonCausal {
            prefix_len: prompt.len() + audio_len,
        },
    };
    Ok(PrefixAssembly {
        prompt: prompt.to_vec(),
        audio_len,
        separator,
        tail: targets[..n - 1].to_vec(),
        labels,
        loss_mask,
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AudioEncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub norm_eps: f64,
}

impl AudioEncoderConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            dim: self.dim,
            heads: self.heads,
            ffn: self.ffn,
            norm_eps: self.norm_eps,
        }
    }
}

/// Small randomly initialised transformer mapping compressed acoustic
/// states into the LM's embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoder {
    pub cfg: AudioEncoderConfig,
    /// Present only when the input width differs from the encoder width.
    pub input: Option<Linear>,
    pub encoder: Encoder,
    pub proj: Linear,
}

impl AudioEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: AudioEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let input = if cfg.input_dim != cfg.dim {
            Some(Linear::new(store, &format!("{name}.input"), cfg.input_dim, cfg.dim, true, rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            input,
            encoder: Encoder::new(store, &format!("{name}.encoder"), cfg.encoder(), rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), cfg.dim, cfg.output_dim, true, rng)?,
        })
    }

    /// Packed `[rows, input_dim]` → `[rows, output_dim]`; full attention
    /// within each span.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, spans: &[Span]) -> Result<Var> {
        if spans.iter().any(|s| s.len == 0) {
            return Err(Error::Contract("audio encoder input must hold at least one frame".into()));
        }
        let x = match &self.input {
            Some(l) => l.forward(g, x)?,
            None => x,
        };
        let h = self.encoder.forward(g, x, spans)?;
        self.proj.forward(g, h)
    }
}

/// Convolutional length reducer trained jointly with the downstream model:
/// the compressor's convolution + transformer stack followed by three
/// stride-2 1-D convolutions (32x in total).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSubsampler {
    pub frontend: ConvFrontend,
    pub encoder: Encoder,
    pub convs: Conv1dStack,
}

impl ConvSubsampler {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        feature_dim: usize,
        channels: usize,
        encoder: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            frontend: ConvFrontend::new(store, &format!("{name}.frontend"), feature_dim, channels, encoder.dim, rng)?,
            encoder: Encoder::new(store, &format!("{name}.encoder"), encoder, rng)?,
            convs: Conv1dStack::new(store, &format!("{name}.convs"), 3, encoder.dim, rng)?,
        })
    }

    /// Always trained with the rest of the model.
    pub fn jointly_trainable(&self) -> bool {
        true
    }

    pub fn out_len(frames: usize) -> usize {
        frames.div_ceil(32)
    }

    /// `[T, F]` → `[ceil(T/32), dim]` for one utterance.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let x = self.frontend.forward(g, features)?;
        let len = g.shape(x)[0];
        let h = self.encoder.forward(g, x, &[Span::new(0, len)])?;
        self.convs.forward(g, h)
    }
}

/// Frontend of the from-scratch decoder: 4x convolutional subsampling to
/// the model width plus a learned start-of-generation embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ScratchFrontend {
    pub conv: ConvFrontend,
    pub sos: ParamId,
}

impl ScratchFrontend {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        feature_dim: usize,
        channels: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: ConvFrontend::new(store, &format!("{name}.conv"), feature_dim, channels, dim, rng)?,
            sos: store.add(&format!("{name}.sos"), gaussian(&[1, dim], 1.0, rng), false)?,
        })
    }

    /// `[T, F]` → `[ceil(T/4) + 1, dim]`, the last row being SOS.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let x = self.conv.forward(g, features)?;
        let sos = g.param(self.sos);
        g.concat_rows(&[x, sos])
    }
}

/// Tokenised prompt for an utterance.
pub fn prompt_tokens(template: PromptTemplate, vocab: &Vocab, language_id: usize) -> Vec<usize> {
    template.tokens(vocab, language_id)
}

/// Human-readable rendering of model ids, for logs.
pub fn render_tokens(vocab: &Vocab, ids: &[usize]) -> String {
    let mut out = String::new();
    for (i, &id) in ids.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let s = match id {
            PAD => String::from("<pad>"),
            BOS => String::from("<s>"),
            EOS => String::from("</s>"),
            SOS => String::from("<sos>"),
            _ if id < 4 + PROMPT_WORDS.len() => String::from(PROMPT_WORDS[id - 4]),
            _ if id < vocab.target_base() => format!("<lang{}>", id - vocab.language(0)),
            _ => format!("t{}", id - vocab.target_base() + 1),
        };
        out.push_str(&s);
    }
    out
}

/// Build the row tensor of constant embeddings `prompt ⊕ audio ⊕ separator`
/// for decoding, given the LM embedding table.
pub fn prefix_rows<T: Scalar>(
    table: &Tensor<T>,
    prompt: &[usize],
    audio: &Tensor<T>,
    separator: Option<usize>,
) -> Result<Tensor<T>> {
    let p = table.gather_rows(prompt);
    let s = separator.map(|id| table.gather_rows(&[id]));
    let mut parts: Vec<&Tensor<T>> = Vec::new();
    if !prompt.is_empty() {
        parts.push(&p);
    }
    parts.push(audio);
    if let Some(s) = &s {
        parts.push(s);
    }
    Tensor::concat_rows(&parts)
}
