//! Decoder-only speech models: a frozen text LM conditioned on encoded
//! audio through a prefix, and the from-scratch decoder fed subsampled
//! frames followed by SOS. Both decode through [`PrefixScorer`].

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;

use crate::bridge::{assemble_prefix, AudioEncoder, AudioEncoderConfig, ConvSubsampler, MaskVariant, Vocab, IGNORE};
use crate::decoder::{DecodeState, Decoder, DecoderConfig, SeqLayout};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::AttentionMask;
use crate::nn::{pack, EncoderConfig, Span};
use crate::param::ParamStore;
use crate::search::Scorer;
use crate::tensor::{Scalar, Tensor};

/// One training or decoding item for a speech model.
#[derive(Debug, Clone)]
pub struct SpeechItem<'a, T> {
    /// Compressed hidden states, or raw features when the model
    /// subsamples them itself.
    pub audio: &'a Tensor<T>,
    pub prompt: Vec<usize>,
    /// Model-vocabulary targets ending with EOS (ignored when decoding).
    pub targets: Vec<usize>,
}

fn log_softmax_f64<T: Scalar>(logits: &Tensor<T>) -> Vec<f64> {
    let mut v: Vec<f64> = logits.data().iter().map(|&x| Scalar::to_f64(x)).collect();
    crate::kernels::log_softmax_inplace(&mut v);
    v
}

/// Decoder state plus the next-token distribution it predicts.
#[derive(Debug, Clone)]
pub struct PrefixState<T> {
    pub cache: DecodeState<T>,
    pub logprobs: Rc<[f64]>,
}

/// Scores continuations of a constant embedding prefix with a decoder.
pub struct PrefixScorer<'a, T> {
    pub decoder: &'a Decoder,
    pub store: &'a ParamStore<T>,
}

impl<'a, T: Scalar> PrefixScorer<'a, T> {
    pub fn new(decoder: &'a Decoder, store: &'a ParamStore<T>) -> Self {
        Self { decoder, store }
    }

    /// Feed the whole prefix (`[rows, model_dim]`) in one call.
    pub fn init(&self, prefix: &Tensor<T>, mask: AttentionMask, memory: Option<&Tensor<T>>) -> Result<PrefixState<T>> {
        let start = self.decoder.start(self.store, mask, memory)?;
        let (logits, cache) = self.decoder.incremental_forward(self.store, &start, prefix)?;
        Ok(PrefixState {
            cache,
            logprobs: log_softmax_f64(&logits).into(),
        })
    }
}

impl<T: Scalar> Scorer for PrefixScorer<'_, T> {
    type State = PrefixState<T>;

    fn next_scores(&mut self, state: &PrefixState<T>, _: &[usize]) -> Result<Vec<f64>> {
        Ok(state.logprobs.to_vec())
    }

    fn advance(&mut self, state: &PrefixState<T>, _: &[usize], token: usize) -> Result<PrefixState<T>> {
        let row = self.decoder.embed_rows(self.store, &[token])?;
        let (logits, cache) = self.decoder.incremental_forward(self.store, &state.cache, &row)?;
        Ok(PrefixState {
            cache,
            logprobs: log_softmax_f64(&logits).into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeechLlmConfig {
    pub audio: AudioEncoderConfig,
    pub mask: MaskVariant,
    /// Token placed between the audio and the targets.
    pub separator: Option<usize>,
}

/// Frozen text LM plus trainable audio encoder (and, for the convolutional
/// baseline, a trainable subsampler on raw features).
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechLlm {
    pub cfg: SpeechLlmConfig,
    pub vocab: Vocab,
    pub lm: Decoder,
    pub audio: AudioEncoder,
    pub subsampler: Option<ConvSubsampler>,
}

/// Name prefixes of the parts of a [`SpeechLlm`].
pub const LM_PREFIX: &str = "lm.";
pub const AUDIO_PREFIX: &str = "audio_encoder.";
pub const SUBSAMPLER_PREFIX: &str = "subsampler.";

impl SpeechLlm {
    /// Registers the LM (frozen), the audio encoder and, when
    /// `subsampler` is given, the subsampler with `(feature_dim, channels,
    /// encoder)` sizes.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        vocab: Vocab,
        lm_cfg: DecoderConfig,
        cfg: SpeechLlmConfig,
        subsampler: Option<(usize, usize, EncoderConfig)>,
        rng: &mut R,
    ) -> Result<Self> {
        if lm_cfg.vocab_size != vocab.size() {
            return Err(Error::Config(format!(
                "LM vocabulary {} differs from the model vocabulary {}",
                lm_cfg.vocab_size,
                vocab.size()
            )));
        }
        if cfg.audio.output_dim != lm_cfg.model_dim {
            return Err(Error::Config("audio encoder output must match the LM width".into()));
        }
        let lm = Decoder::new(store, "lm", lm_cfg, rng)?;
        store.set_frozen_prefix(LM_PREFIX, true);
        let subsampler = match subsampler {
            Some((f, c, enc)) => {
                if enc.dim != cfg.audio.input_dim {
                    return Err(Error::Config("subsampler width must match the audio encoder input".into()));
                }
                Some(ConvSubsampler::new(store, "subsampler", f, c, enc, rng)?)
            }
            None => None,
        };
        let audio = AudioEncoder::new(store, "audio_encoder", cfg.audio, rng)?;
        Ok(Self {
            cfg,
            vocab,
            lm,
            audio,
            subsampler,
        })
    }

    fn audio_embeddings<T: Scalar>(&self, g: &mut Graph<'_, T>, audio: &[&Tensor<T>]) -> Result<(Var, Vec<Span>)> {
        let mut parts = Vec::with_capacity(audio.len());
        let mut lens = Vec::with_capacity(audio.len());
        for a in audio {
            let x = g.constant((*a).clone());
            let x = match &self.subsampler {
                Some(s) => s.forward(g, x)?,
                None => x,
            };
            lens.push(g.shape(x)[0]);
            parts.push(x);
        }
        let x = g.concat_rows(&parts)?;
        let spans = pack(&lens);
        Ok((self.audio.forward(g, x, &spans)?, spans))
    }

    /// Mean next-token cross-entropy over the target positions of a batch.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<'_, T>, items: &[SpeechItem<'_, T>]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Empty("speech batch".into()));
        }
        let audio: Vec<&Tensor<T>> = items.iter().map(|i| i.audio).collect();
        let (emb, spans) = self.audio_embeddings(g, &audio)?;
        let mut parts = Vec::new();
        let mut lens = Vec::new();
        let mut layout = Vec::new();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut offset = 0;
        for (item, span) in items.iter().zip(&spans) {
            let asm = assemble_prefix(&item.prompt, span.len, &item.targets, self.cfg.mask, self.cfg.separator)?;
            if !item.prompt.is_empty() {
                parts.push(self.lm.embed(g, &item.prompt)?);
            }
            let idx: Vec<usize> = (span.start..span.end()).collect();
            parts.push(g.gather_rows(emb, &idx)?);
            let tail: Vec<usize> = self.cfg.separator.into_iter().chain(asm.tail.iter().copied()).collect();
            if !tail.is_empty() {
                parts.push(self.lm.embed(g, &tail)?);
            }
            for (i, &l) in asm.labels.iter().enumerate() {
                if l != IGNORE {
                    rows.push(offset + i);
                    labels.push(l);
                }
            }
            layout.push(SeqLayout {
                span: Span::new(offset, asm.len()),
                mask: asm.mask,
            });
            lens.push(asm.len());
            offset += asm.len();
        }
        let x = g.concat_rows(&parts)?;
        let h = self.lm.hidden(g, x, &layout, None)?;
        let h = g.gather_rows(h, &rows)?;
        let logits = self.lm.head.forward(g, h)?;
        g.cross_entropy(logits, &labels, IGNORE)
    }

    /// Constant prefix rows `prompt ⊕ audio ⊕ separator` for one utterance.
    pub fn prefix<T: Scalar>(&self, store: &ParamStore<T>, audio: &Tensor<T>, prompt: &[usize]) -> Result<(Tensor<T>, AttentionMask)> {
        let mut g = Graph::new(store);
        let (emb, _) = self.audio_embeddings(&mut g, &[audio])?;
        let emb = g.value(emb).clone();
        let a = emb.rows_cols().0;
        let rows = crate::bridge::prefix_rows(store.tensor(self.lm.embed), prompt, &emb, self.cfg.separator)?;
        let mask = match self.cfg.mask {
            MaskVariant::Causal => AttentionMask::Causal,
            MaskVariant::PrefixNonCausal => AttentionMask::PrefixNonCausal {
                prefix_len: prompt.len() + a,
            },
        };
        Ok((rows, mask))
    }

    /// Scorer and initial state for decoding one utterance.
    pub fn scorer<'a, T: Scalar>(
        &'a self,
        store: &'a ParamStore<T>,
        audio: &Tensor<T>,
        prompt: &[usize],
    ) -> Result<(PrefixScorer<'a, T>, PrefixState<T>)> {
        let (rows, mask) = self.prefix(store, audio, prompt)?;
        let s = PrefixScorer::new(&self.lm, store);
        let init = s.init(&rows, mask, None)?;
        Ok((s, init))
    }
}

/// Randomly initialised decoder-only model over `frames ⊕ SOS ⊕ targets`
/// with a causal mask throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct ScratchDecoder {
    pub frontend: crate::bridge::ScratchFrontend,
    pub decoder: Decoder,
}

impl ScratchDecoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: DecoderConfig,
        feature_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            frontend: crate::bridge::ScratchFrontend::new(store, "frontend", feature_dim, channels, cfg.model_dim, rng)?,
            decoder: Decoder::new(store, "decoder", cfg, rng)?,
        })
    }

    /// Mean cross-entropy over the positions from SOS onwards; `audio`
    /// holds raw features.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<'_, T>, items: &[SpeechItem<'_, T>]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Empty("speech batch".into()));
        }
        let mut parts = Vec::new();
        let mut layout = Vec::new();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut offset = 0;
        for item in items {
            if item.targets.last() != Some(&crate::bridge::EOS) {
                return Err(Error::Contract("training targets must end with EOS".into()));
            }
            let x = g.constant(item.audio.clone());
            let fe = self.frontend.forward(g, x)?;
            let a = g.shape(fe)[0];
            parts.push(fe);
            let n = item.targets.len();
            if n > 1 {
                parts.push(self.decoder.embed(g, &item.targets[..n - 1])?);
            }
            // the SOS row predicts the first target
            for (k, &t) in item.targets.iter().enumerate() {
                rows.push(offset + a - 1 + k);
                labels.push(t);
            }
            let len = a + n - 1;
            layout.push(SeqLayout {
                span: Span::new(offset, len),
                mask: AttentionMask::Causal,
            });
            offset += len;
        }
        let x = g.concat_rows(&parts)?;
        let h = self.decoder.hidden(g, x, &layout, None)?;
        let h = g.gather_rows(h, &rows)?;
        let logits = self.decoder.head.forward(g, h)?;
        g.cross_entropy(logits, &labels, IGNORE)
    }

    pub fn scorer<'a, T: Scalar>(
        &'a self,
        store: &'a ParamStore<T>,
        features: &Tensor<T>,
    ) -> Result<(PrefixScorer<'a, T>, PrefixState<T>)> {
        let mut g = Graph::new(store);
        let x = g.constant(features.clone());
        let fe = self.frontend.forward(&mut g, x)?;
        let rows = g.value(fe).clone();
        let s = PrefixScorer::new(&self.decoder, store);
        let init = s.init(&rows, AttentionMask::Causal, None)?;
        Ok((s, init))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::EOS;
    use crate::search::greedy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_lm(vocab: &Vocab) -> DecoderConfig {
        DecoderConfig {
            n_layers: 2,
            n_heads: 2,
            model_dim: 8,
            ffn_dim: 12,
            vocab_size: vocab.size(),
            ..Default::default()
        }
    }

    fn audio_cfg(input: usize, out: usize) -> AudioEncoderConfig {
        AudioEncoderConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            ffn: 8,
            input_dim: input,
            output_dim: out,
            norm_eps: 1e-5,
        }
    }

    /// Teacher-forced logits at every target position equal the
    /// incremental decoder's distributions along the same tokens.
    #[test]
    fn teacher_forcing_matches_incremental() {
        let vocab = Vocab::new(2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        for mask in [MaskVariant::Causal, MaskVariant::PrefixNonCausal] {
            let cfg = SpeechLlmConfig {
                audio: audio_cfg(5, 8),
                mask,
                separator: Some(crate::bridge::BOS),
            };
            let mut s = ParamStore::<f64>::new();
            let m = SpeechLlm::new(&mut s, vocab, tiny_lm(&vocab), cfg, None, &mut rng).unwrap();
            store = s;
            let audio = Tensor::randn(&[4, 5], 1.0, &mut rng);
            let prompt = alloc::vec![4, 5];
            let targets = vocab.target_with_eos(&[3, 1, 4]).unwrap();
            let item = SpeechItem {
                audio: &audio,
                prompt: prompt.clone(),
                targets: targets.clone(),
            };
            let mut g = Graph::new(&store);
            let loss = m.loss(&mut g, &[item]).unwrap();
            let tf = g.value(loss).item();

            let (mut sc, mut st) = m.scorer(&store, &audio, &prompt).unwrap();
            let mut nll = 0.0;
            let mut prev = Vec::new();
            for &t in &targets {
                let lp = sc.next_scores(&st, &prev).unwrap();
                nll -= lp[t];
                st = sc.advance(&st, &prev, t).unwrap();
                prev.push(t);
            }
            assert!((tf - nll / targets.len() as f64).abs() < 1e-10, "{mask:?}: {tf} vs {}", nll / 4.0);
        }
        assert!(store.trainable_count() > 0);
    }

    #[test]
    fn lm_is_frozen_and_gets_no_gradient() {
        let vocab = Vocab::new(2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let cfg = SpeechLlmConfig {
            audio: audio_cfg(5, 8),
            mask: MaskVariant::Causal,
            separator: Some(crate::bridge::BOS),
        };
        let m = SpeechLlm::new(&mut store, vocab, tiny_lm(&vocab), cfg, None, &mut rng).unwrap();
        let audio = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let item = SpeechItem {
            audio: &audio,
            prompt: alloc::vec![4],
            targets: vocab.target_with_eos(&[2]).unwrap(),
        };
        let mut g = Graph::new(&store);
        let loss = m.loss(&mut g, &[item]).unwrap();
        let grads = g.backward(loss).unwrap();
        for (id, _) in grads.iter() {
            let name = &store.get(id).name;
            assert!(name.starts_with(AUDIO_PREFIX), "{name} received a gradient");
        }
        assert!(!grads.is_empty());
    }

    #[test]
    fn scratch_decoder_teacher_forcing_and_greedy() {
        let vocab = Vocab::new(1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let m = ScratchDecoder::new(&mut store, tiny_lm(&vocab), 4, 2, &mut rng).unwrap();
        let feats = Tensor::randn(&[9, 4], 1.0, &mut rng);
        let targets = vocab.target_with_eos(&[2, 2, 4]).unwrap();
        let item = SpeechItem {
            audio: &feats,
            prompt: Vec::new(),
            targets: targets.clone(),
        };
        let mut g = Graph::new(&store);
        let loss = m.loss(&mut g, &[item.clone(), item]).unwrap();
        let tf = g.value(loss).item();
        let (mut sc, mut st) = m.scorer(&store, &feats).unwrap();
        let mut nll = 0.0;
        for &t in &targets {
            nll -= st.logprobs[t];
            st = sc.advance(&st, &[], t).unwrap();
        }
        assert!((tf - nll / 4.0).abs() < 1e-10);
        let (sc, st) = m.scorer(&store, &feats).unwrap();
        let mut sc = sc;
        let (toks, _) = greedy(&mut sc, st, 6, Some(EOS)).unwrap();
        assert!(!toks.is_empty() && toks.len() <= 6);
    }
}
