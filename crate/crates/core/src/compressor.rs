//! CTC compressor: strided convolutions, a transformer encoder and a CTC
//! head. Its per-frame posteriors decide how its hidden states are shortened.

use alloc::vec::Vec;

use rand::Rng;

use crate::ctc::{self, CompressionMode, CtcPosteriorgram};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ConvFrontend, Encoder, EncoderConfig, Linear, Span};
use crate::param::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressorConfig {
    pub feature_dim: usize,
    pub channels: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Source vocabulary size including the blank at 0.
    pub classes: usize,
    pub norm_eps: f64,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            channels: 8,
            layers: 2,
            dim: 64,
            heads: 4,
            ffn: 256,
            classes: 32,
            norm_eps: 1e-5,
        }
    }
}

impl CompressorConfig {
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

#[derive(Debug, Clone, PartialEq)]
pub struct CtcCompressor {
    pub cfg: CompressorConfig,
    pub frontend: ConvFrontend,
    pub encoder: Encoder,
    pub head: Linear,
}

/// Packed outputs of a batched compressor pass.
#[derive(Debug, Clone)]
pub struct CompressorOut {
    pub hidden: Var,
    pub logits: Var,
    pub spans: Vec<Span>,
}

/// One compressed utterance.
#[derive(Debug, Clone)]
pub struct Compressed<T> {
    pub hidden: Tensor<T>,
    pub posteriorgram: CtcPosteriorgram<T>,
}

impl<T: Scalar> Compressed<T> {
    /// Frames after subsampling, before compression.
    pub fn input_frames(&self) -> usize {
        self.posteriorgram.frames()
    }

    pub fn output_frames(&self) -> usize {
        self.hidden.rows_cols().0
    }
}

impl CtcCompressor {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: CompressorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.classes < 2 {
            return Err(Error::Config("compressor needs at least one label besides blank".into()));
        }
        Ok(Self {
            cfg,
            frontend: ConvFrontend::new(store, &alloc::format!("{name}.frontend"), cfg.feature_dim, cfg.channels, cfg.dim, rng)?,
            encoder: Encoder::new(store, &alloc::format!("{name}.encoder"), cfg.encoder(), rng)?,
            head: Linear::new(store, &alloc::format!("{name}.ctc_head"), cfg.dim, cfg.classes, true, rng)?,
        })
    }

    /// Hidden length for `frames` input frames: `ceil(ceil(T/2)/2)`.
    pub fn out_len(frames: usize) -> usize {
        ConvFrontend::out_len(frames)
    }

    /// Shared body: frontend per utterance, packed encoder. Returns the
    /// packed hidden states and their spans.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, features: &[&Tensor<T>]) -> Result<(Var, Vec<Span>)> {
        if features.is_empty() {
            return Err(Error::Empty("compressor batch".into()));
        }
        let mut parts = Vec::with_capacity(features.len());
        let mut lens = Vec::with_capacity(features.len());
        for f in features {
            let x = g.constant((*f).clone());
            let y = self.frontend.forward(g, x)?;
            lens.push(g.shape(y)[0]);
            parts.push(y);
        }
        let x = g.concat_rows(&parts)?;
        let spans = crate::nn::pack(&lens);
        Ok((self.encoder.forward(g, x, &spans)?, spans))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, features: &[&Tensor<T>]) -> Result<CompressorOut> {
        let (hidden, spans) = self.encode(g, features)?;
        let logits = self.head.forward(g, hidden)?;
        Ok(CompressorOut { hidden, logits, spans })
    }

    /// Mean per-utterance CTC loss against source transcripts.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<'_, T>, features: &[&Tensor<T>], targets: &[&[usize]]) -> Result<Var> {
        if features.len() != targets.len() {
            return Err(Error::Contract("one transcript per utterance required".into()));
        }
        let out = self.forward(g, features)?;
        let lp = g.log_softmax(out.logits);
        let mut losses = Vec::with_capacity(targets.len());
        for (span, t) in out.spans.iter().zip(targets) {
            let rows: Vec<usize> = (span.start..span.end()).collect();
            let part = g.gather_rows(lp, &rows)?;
            losses.push(g.ctc_loss(part, t)?);
        }
        let all = g.concat_rows(&losses)?;
        Ok(g.mean(all))
    }

    /// Hidden states and posteriorgram of one utterance (no gradients kept).
    pub fn compressor_forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
    ) -> Result<(Tensor<T>, CtcPosteriorgram<T>)> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, &[features])?;
        Ok((g.value(out.hidden).clone(), CtcPosteriorgram::from_logits(g.value(out.logits))))
    }

    /// Run the compressor and shorten its hidden states with `mode`.
    pub fn compress<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        mode: CompressionMode,
        drop_blank_runs: bool,
    ) -> Result<Compressed<T>> {
        let (hidden, posteriorgram) = self.compressor_forward(store, features)?;
        let hidden = ctc::compress(mode, &hidden, &posteriorgram.alignment, drop_blank_runs)?;
        Ok(Compressed { hidden, posteriorgram })
    }
}
