//! Encoder-decoder baseline with an auxiliary CTC head on the encoder,
//! joint CTC/attention prefix decoding and n-best rescoring.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;

use crate::bridge::{BOS, EOS, IGNORE};
use crate::ctc::BLANK;
use crate::decoder::{Decoder, DecoderConfig, SeqLayout};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mask::AttentionMask;
use crate::models::{PrefixScorer, PrefixState, SpeechItem};
use crate::nn::{pack, ConvFrontend, Encoder, EncoderConfig, Linear, Span};
use crate::param::ParamStore;
use crate::search::{beam_search, BeamConfig, Hypothesis, Scorer};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncDecConfig {
    pub feature_dim: usize,
    pub channels: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Weight of the CTC term in the training loss.
    pub ctc_weight: f64,
}

impl EncDecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config(format!("ctc weight {} outside [0, 1]", self.ctc_weight)));
        }
        if self.encoder.dim != self.decoder.model_dim || !self.decoder.cross_attention {
            return Err(Error::Config(
                "decoder must cross-attend to an encoder of the same width".into(),
            ));
        }
        self.decoder.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncDec {
    pub cfg: EncDecConfig,
    pub frontend: ConvFrontend,
    pub encoder: Encoder,
    pub ctc_head: Linear,
    pub decoder: Decoder,
}

/// The three training losses of one batch.
#[derive(Debug, Clone, Copy)]
pub struct Seq2SeqLosses {
    pub attention: Var,
    pub ctc: Var,
    pub total: Var,
}

impl EncDec {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: EncDecConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            frontend: ConvFrontend::new(store, "encoder.frontend", cfg.feature_dim, cfg.channels, cfg.encoder.dim, rng)?,
            encoder: Encoder::new(store, "encoder", cfg.encoder, rng)?,
            ctc_head: Linear::new(store, "encoder.ctc_head", cfg.encoder.dim, cfg.decoder.vocab_size, true, rng)?,
            decoder: Decoder::new(store, "decoder", cfg.decoder, rng)?,
        })
    }

    /// Packed encoder states for raw feature matrices.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, features: &[&Tensor<T>]) -> Result<(Var, Vec<Span>)> {
        let mut parts = Vec::with_capacity(features.len());
        let mut lens = Vec::with_capacity(features.len());
        for f in features {
            let x = g.constant((*f).clone());
            let y = self.frontend.forward(g, x)?;
            lens.push(g.shape(y)[0]);
            parts.push(y);
        }
        let x = g.concat_rows(&parts)?;
        let spans = pack(&lens);
        Ok((self.encoder.forward(g, x, &spans)?, spans))
    }

    /// `total = (1 - w) attention + w ctc`, both means over the batch
    /// (attention per token, CTC per utterance). The CTC target is the
    /// target sequence without EOS.
    pub fn seq2seq_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, items: &[SpeechItem<'_, T>]) -> Result<Seq2SeqLosses> {
        if items.is_empty() {
            return Err(Error::Empty("seq2seq batch".into()));
        }
        let feats: Vec<&Tensor<T>> = items.iter().map(|i| i.audio).collect();
        let (mem, spans) = self.encode(g, &feats)?;

        let ctc_logits = self.ctc_head.forward(g, mem)?;
        let lp = g.log_softmax(ctc_logits);
        let mut ctc_parts = Vec::with_capacity(items.len());
        for (item, span) in items.iter().zip(&spans) {
            let rows: Vec<usize> = (span.start..span.end()).collect();
            let part = g.gather_rows(lp, &rows)?;
            let target = strip_eos(&item.targets)?;
            ctc_parts.push(g.ctc_loss(part, target)?);
        }
        let ctc_all = g.concat_rows(&ctc_parts)?;
        let ctc = g.mean(ctc_all);

        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        let mut lens = Vec::new();
        for item in items {
            strip_eos(&item.targets)?;
            inputs.push(BOS);
            inputs.extend_from_slice(&item.targets[..item.targets.len() - 1]);
            labels.extend_from_slice(&item.targets);
            lens.push(item.targets.len());
        }
        let layout: Vec<SeqLayout> = pack(&lens)
            .into_iter()
            .map(|span| SeqLayout {
                span,
                mask: AttentionMask::Causal,
            })
            .collect();
        let x = self.decoder.embed(g, &inputs)?;
        let logits = self.decoder.forward(g, x, &layout, Some((mem, &spans)))?;
        let attention = g.cross_entropy(logits, &labels, IGNORE)?;

        let w = self.cfg.ctc_weight;
        let a = g.scale(attention, T::from_f64(1.0 - w));
        let c = g.scale(ctc, T::from_f64(w));
        let total = g.add(a, c)?;
        Ok(Seq2SeqLosses { attention, ctc, total })
    }

    /// Encoder states and CTC log-posteriors of one utterance.
    pub fn encode_one<T: Scalar>(&self, store: &ParamStore<T>, features: &Tensor<T>) -> Result<(Tensor<T>, Tensor<f64>)> {
        let mut g = Graph::new(store);
        let (mem, _) = self.encode(&mut g, &[features])?;
        let logits = self.ctc_head.forward(&mut g, mem)?;
        let lp = g.log_softmax(logits);
        Ok((g.value(mem).clone(), g.value(lp).cast()))
    }

    /// Joint CTC/attention beam search for one utterance.
    pub fn decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        beam: BeamConfig,
        ctc_weight: f64,
    ) -> Result<Vec<Hypothesis<JointState<PrefixState<T>>>>> {
        let (mem, ctc_lp) = self.encode_one(store, features)?;
        let att = PrefixScorer::new(&self.decoder, store);
        let bos = self.decoder.embed_rows(store, &[BOS])?;
        let init = att.init(&bos, AttentionMask::Causal, Some(&mem))?;
        joint_beam_search(att, init, ctc_lp, ctc_weight, beam)
    }
}

fn strip_eos(targets: &[usize]) -> Result<&[usize]> {
    match targets.split_last() {
        Some((&EOS, rest)) => Ok(rest),
        _ => Err(Error::Contract("training targets must end with EOS".into())),
    }
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + num_traits::Float::ln_1p(num_traits::Float::exp(-(a - b).abs()))
}

/// Forward variables of one prefix: log-probability of the prefix being
/// completed by frame `t` ending in a label (`r_n`) or in blank (`r_b`).
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPrefixState {
    pub r_n: Rc<[f64]>,
    pub r_b: Rc<[f64]>,
    /// Log prefix probability of this prefix.
    pub psi: f64,
    pub last: Option<usize>,
}

/// CTC prefix probabilities over a fixed posteriorgram (`[T, V]`, blank 0).
#[derive(Debug, Clone)]
pub struct CtcPrefixScorer {
    pub log_probs: Tensor<f64>,
    pub eos: usize,
}

impl CtcPrefixScorer {
    pub fn new(log_probs: Tensor<f64>, eos: usize) -> Result<Self> {
        if log_probs.ndim() != 2 || log_probs.rows_cols().0 == 0 {
            return Err(Error::Shape(format!("posteriorgram {:?}", log_probs.shape())));
        }
        Ok(Self { log_probs, eos })
    }

    fn frames(&self) -> usize {
        self.log_probs.rows_cols().0
    }

    /// State of the empty prefix: everything so far is blank.
    pub fn initial(&self) -> CtcPrefixState {
        let t = self.frames();
        let mut r_b = Vec::with_capacity(t);
        let mut acc = 0.0;
        for i in 0..t {
            acc += self.log_probs.row(i)[BLANK];
            r_b.push(acc);
        }
        CtcPrefixState {
            r_n: alloc::vec![f64::NEG_INFINITY; t].into(),
            r_b: r_b.into(),
            psi: 0.0,
            last: None,
        }
    }

    /// Log prefix probability after appending `c` to `state`'s prefix, with
    /// the new forward variables. EOS yields the full-sequence probability.
    pub fn extend(&self, state: &CtcPrefixState, c: usize) -> (f64, Option<CtcPrefixState>) {
        if c == self.eos {
            let t = self.frames() - 1;
            return (logaddexp(state.r_n[t], state.r_b[t]), None);
        }
        if c == BLANK || c >= self.log_probs.rows_cols().1 {
            return (f64::NEG_INFINITY, None);
        }
        let t_max = self.frames();
        let lp = |t: usize, k: usize| self.log_probs.row(t)[k];
        let mut r_n = Vec::with_capacity(t_max);
        let mut r_b = Vec::with_capacity(t_max);
        let first = if state.last.is_none() { lp(0, c) } else { f64::NEG_INFINITY };
        r_n.push(first);
        r_b.push(f64::NEG_INFINITY);
        let mut psi = first;
        for t in 1..t_max {
            let prev_n = if state.last == Some(c) { f64::NEG_INFINITY } else { state.r_n[t - 1] };
            let phi = logaddexp(state.r_b[t - 1], prev_n);
            r_n.push(logaddexp(r_n[t - 1], phi) + lp(t, c));
            r_b.push(logaddexp(r_b[t - 1], r_n[t - 1]) + lp(t, BLANK));
            psi = logaddexp(psi, phi + lp(t, c));
        }
        (
            psi,
            Some(CtcPrefixState {
                r_n: r_n.into(),
                r_b: r_b.into(),
                psi,
                last: Some(c),
            }),
        )
    }

    /// Incremental score `log psi(prefix + c) - log psi(prefix)`.
    pub fn ctc_prefix_score(&self, state: &CtcPrefixState, c: usize) -> f64 {
        let (psi, _) = self.extend(state, c);
        if psi == f64::NEG_INFINITY {
            return psi;
        }
        psi - state.psi
    }
}

/// Joint hypothesis state: the attention decoder's plus the CTC prefix
/// variables.
#[derive(Debug, Clone)]
pub struct JointState<S> {
    pub att: S,
    pub ctc: CtcPrefixState,
}

/// Scores `(1 - w) attention + w ctc_prefix`; `w = 0` skips CTC entirely.
pub struct JointScorer<A> {
    pub att: A,
    pub ctc: CtcPrefixScorer,
    pub weight: f64,
}

impl<A: Scorer> Scorer for JointScorer<A> {
    type State = JointState<A::State>;

    fn next_scores(&mut self, state: &Self::State, tokens: &[usize]) -> Result<Vec<f64>> {
        let att = self.att.next_scores(&state.att, tokens)?;
        let w = self.weight;
        if w == 0.0 {
            return Ok(att);
        }
        Ok(att
            .iter()
            .enumerate()
            .map(|(c, &a)| {
                let ctc = self.ctc.ctc_prefix_score(&state.ctc, c);
                if ctc == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else if w == 1.0 {
                    ctc
                } else {
                    (1.0 - w) * a + w * ctc
                }
            })
            .collect())
    }

    fn advance(&mut self, state: &Self::State, tokens: &[usize], token: usize) -> Result<Self::State> {
        let att = self.att.advance(&state.att, tokens, token)?;
        let ctc = if self.weight == 0.0 {
            state.ctc.clone()
        } else {
            match self.ctc.extend(&state.ctc, token).1 {
                Some(s) => s,
                None => return Err(Error::Contract(format!("token {token} cannot extend a CTC prefix"))),
            }
        };
        Ok(JointState { att, ctc })
    }
}

/// Beam search with joint scores over `ctc_log_probs` (`[T, V]`).
pub fn joint_beam_search<A: Scorer>(
    att: A,
    att_init: A::State,
    ctc_log_probs: Tensor<f64>,
    ctc_weight: f64,
    cfg: BeamConfig,
) -> Result<Vec<Hypothesis<JointState<A::State>>>> {
    if !(0.0..=1.0).contains(&ctc_weight) {
        return Err(Error::Config(format!("ctc decode weight {ctc_weight} outside [0, 1]")));
    }
    let eos = cfg
        .eos
        .ok_or_else(|| Error::Config("joint decoding needs an end token".into()))?;
    let ctc = CtcPrefixScorer::new(ctc_log_probs, eos)?;
    let init = JointState {
        att: att_init,
        ctc: ctc.initial(),
    };
    let mut scorer = JointScorer {
        att,
        ctc,
        weight: ctc_weight,
    };
    beam_search(&mut scorer, init, cfg)
}

/// One n-best entry with its component scores.
#[derive(Debug, Clone, PartialEq)]
pub struct NbestEntry {
    pub tokens: Vec<usize>,
    pub seq2seq_score: f64,
    pub lm_score: f64,
    pub final_score: f64,
}

/// Recompute `final = (1 - mu) seq2seq + mu lm` and sort descending;
/// ties keep their input order.
pub fn rescore_nbest(mut entries: Vec<NbestEntry>, mu: f64) -> Result<Vec<NbestEntry>> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Config(format!("interpolation weight {mu} outside [0, 1]")));
    }
    for e in &mut entries {
        e.final_score = if mu == 0.0 {
            e.seq2seq_score
        } else if mu == 1.0 {
            e.lm_score
        } else {
            (1.0 - mu) * e.seq2seq_score + mu * e.lm_score
        };
    }
    entries.sort_by(|a, b| b.final_score.total_cmp(&a.final_score));
    Ok(entries)
}
