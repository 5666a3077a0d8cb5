//! Decoder-only transformer: pre-norm blocks with RoPE, configurable
//! self-attention masks, optional cross-attention, and an incremental
//! key/value cache for generation.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::AttnSegment;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::RopeTable;
use crate::mask::AttentionMask;
use crate::nn::{gaussian, Block, BlockConfig, KvPair, Linear, SelfAttnCtx, Span};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// Cross-attention to an encoder memory in every layer.
    pub cross_attention: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            model_dim: 128,
            ffn_dim: 512,
            vocab_size: 40,
            rope_base: 10000.0,
            norm_eps: 1e-5,
            cross_attention: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        if (self.model_dim / self.n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary embeddings",
                self.model_dim / self.n_heads
            )));
        }
        if self.vocab_size < 2 || self.n_layers == 0 {
            return Err(Error::Config("decoder needs layers and a vocabulary".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.model_dim,
            heads: self.n_heads,
            ffn: self.ffn_dim,
            norm_eps: self.norm_eps,
            cross: self.cross_attention,
        }
    }

    /// Embedding table + layers + final norm + untied output head.
    pub fn param_count(&self) -> usize {
        let (v, d) = (self.vocab_size, self.model_dim);
        v * d + self.n_layers * self.block().param_count() + d + d * v
    }
}

/// One packed sequence and its self-attention mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqLayout {
    pub span: Span,
    pub mask: AttentionMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub name: String,
    pub embed: ParamId,
    pub blocks: Vec<Block>,
    pub norm: ParamId,
    pub head: Linear,
}

fn check_mask(mask: AttentionMask, len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::Contract("empty sequence".into()));
    }
    if mask.prefix_len() > len {
        return Err(Error::Contract(format!(
            "mask prefix {} longer than sequence {len}",
            mask.prefix_len()
        )));
    }
    Ok(())
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let embed = store.add(&format!("{name}.embed"), gaussian(&[cfg.vocab_size, d], 1.0, rng), false)?;
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::new(store, &format!("{name}.layers.{i}"), cfg.block(), rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = store.add(&format!("{name}.norm"), Tensor::full(&[d], T::one()), false)?;
        let head = Linear::new(store, &format!("{name}.head"), d, cfg.vocab_size, false, rng)?;
        Ok(Self {
            cfg,
            name: name.into(),
            embed,
            blocks,
            norm,
            head,
        })
    }

    pub fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.embed);
        g.embedding(table, ids)
    }

    fn rope_table<T: Scalar>(&self, positions: usize) -> Rc<RopeTable<T>> {
        Rc::new(RopeTable::new(self.cfg.head_dim(), self.cfg.rope_base, positions.max(1)))
    }

    /// Final hidden states (after the last norm) for packed input embeddings.
    /// `memory` supplies packed encoder outputs, one span per sequence.
    pub fn hidden<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        seqs: &[SeqLayout],
        memory: Option<(Var, &[Span])>,
    ) -> Result<Var> {
        let (rows, cols) = g.value(x).rows_cols();
        if cols != self.cfg.model_dim {
            return Err(Error::Shape(format!(
                "decoder input width {cols}, model dim {}",
                self.cfg.model_dim
            )));
        }
        if seqs.last().map(|s| s.span.end()) != Some(rows) {
            return Err(Error::Contract(format!("sequence layout does not cover {rows} rows")));
        }
        for s in seqs {
            check_mask(s.mask, s.span.len)?;
        }
        let positions: Rc<[usize]> = seqs.iter().flat_map(|s| 0..s.span.len).collect();
        let max_len = seqs.iter().map(|s| s.span.len).max().unwrap_or(1);
        let ctx = SelfAttnCtx {
            segs: seqs
                .iter()
                .map(|s| AttnSegment::self_attn(s.span.start, s.span.len, s.mask))
                .collect(),
            rope: Some((positions, self.rope_table(max_len))),
        };
        let cross = match memory {
            Some((mem, spans)) => {
                if spans.len() != seqs.len() {
                    return Err(Error::Contract("one memory span per sequence required".into()));
                }
                let segs: Rc<[AttnSegment]> = seqs
                    .iter()
                    .zip(spans)
                    .map(|(s, m)| AttnSegment::cross(s.span.start, s.span.len, m.start, m.len))
                    .collect();
                let kv = self
                    .blocks
                    .iter()
                    .map(|b| b.cross_kv(g, mem))
                    .collect::<Result<Vec<_>>>()?;
                Some((kv, segs))
            }
            None => None,
        };
        let mut h = x;
        for (i, b) in self.blocks.iter().enumerate() {
            let c = cross.as_ref().map(|(kv, segs)| (&kv[i], segs));
            h = b.forward(g, h, &ctx, None, c)?.0;
        }
        let gain = g.param(self.norm);
        g.rmsnorm(h, gain, self.cfg.norm_eps)
    }

    /// Logits `[rows, vocab]` for packed input embeddings.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        seqs: &[SeqLayout],
        memory: Option<(Var, &[Span])>,
    ) -> Result<Var> {
        let h = self.hidden(g, x, seqs, memory)?;
        self.head.forward(g, h)
    }

    /// Mean next-token cross-entropy over packed token sequences under a
    /// causal mask (each sequence predicts its own tokens 1..n from 0..n-1).
    pub fn next_token_loss<T: Scalar>(&self, g: &mut Graph<'_, T>, seqs: &[Vec<usize>]) -> Result<Var> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut lens = Vec::new();
        for s in seqs {
            if s.len() < 2 {
                return Err(Error::Contract("language-model sequence needs two tokens".into()));
            }
            inputs.extend_from_slice(&s[..s.len() - 1]);
            targets.extend_from_slice(&s[1..]);
            lens.push(s.len() - 1);
        }
        let layout: Vec<SeqLayout> = crate::nn::pack(&lens)
            .into_iter()
            .map(|span| SeqLayout {
                span,
                mask: AttentionMask::Causal,
            })
            .collect();
        let x = self.embed(g, &inputs)?;
        let logits = self.forward(g, x, &layout, None)?;
        g.cross_entropy(logits, &targets, usize::MAX)
    }

    /// Sum of next-token log-probabilities of `tokens[1..]` given `tokens[0]`
    /// onwards (a text-only score, e.g. for rescoring).
    pub fn sequence_logprob<T: Scalar>(&self, store: &ParamStore<T>, tokens: &[usize]) -> Result<f64> {
        if tokens.len() < 2 {
            return Ok(0.0);
        }
        let mut g = Graph::new(store);
        let x = self.embed(&mut g, &tokens[..tokens.len() - 1])?;
        let layout = [SeqLayout {
            span: Span::new(0, tokens.len() - 1),
            mask: AttentionMask::Causal,
        }];
        let logits = self.forward(&mut g, x, &layout, None)?;
        let lp = g.log_softmax(logits);
        let lp = g.value(lp);
        Ok(tokens[1..]
            .iter()
            .enumerate()
            .map(|(r, &t)| lp.row(r)[t].to_f64())
            .sum())
    }

    /// Fresh generation state. Cross-attention keys/values are computed once
    /// from `memory` and shared by every state derived from this one.
    pub fn start<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        mask: AttentionMask,
        memory: Option<&Tensor<T>>,
    ) -> Result<DecodeState<T>> {
        let cross = match (memory, self.cfg.cross_attention) {
            (Some(m), true) => {
                let mut g = Graph::new(store);
                let mv = g.constant(m.clone());
                let mut out = Vec::with_capacity(self.blocks.len());
                for b in &self.blocks {
                    let kv = b.cross_kv(&mut g, mv)?;
                    out.push((g.value(kv.k).clone(), g.value(kv.v).clone()));
                }
                Some(Rc::new(out))
            }
            (None, false) => None,
            _ => return Err(Error::Contract("memory must be given exactly when the decoder cross-attends".into())),
        };
        Ok(DecodeState {
            mask,
            len: 0,
            k: Vec::new(),
            v: Vec::new(),
            cross,
        })
    }

    /// Feed `x` (`[n, model_dim]`, n >= 1) after the cached positions.
    /// Returns the logits of the last new row and the extended state; the
    /// input state is left untouched so hypotheses can branch from it.
    pub fn incremental_forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        state: &DecodeState<T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, DecodeState<T>)> {
        let (n, d) = x.rows_cols();
        if d != self.cfg.model_dim || x.ndim() != 2 {
            return Err(Error::Shape(format!("incremental input {:?}", x.shape())));
        }
        let p = state.mask.prefix_len();
        if state.len < p && (state.len != 0 || n < p) {
            return Err(Error::Contract(
                "a non-causal prefix must be fed in a single call".into(),
            ));
        }
        let total = state.len + n;
        let mut g = Graph::new(store);
        let xv = g.constant(x.clone());
        let positions: Rc<[usize]> = (state.len..total).collect();
        let ctx = SelfAttnCtx {
            segs: Rc::from([AttnSegment {
                q_start: 0,
                q_len: n,
                kv_start: 0,
                kv_len: total,
                q_offset: state.len,
                mask: state.mask,
            }]),
            rope: Some((positions, self.rope_table(total))),
        };
        let cross_segs: Option<Rc<[AttnSegment]>> = state
            .cross
            .as_ref()
            .map(|c| Rc::from([AttnSegment::cross(0, n, 0, c[0].0.rows_cols().0)]));
        let mut h = xv;
        let mut new_k = Vec::with_capacity(self.blocks.len());
        let mut new_v = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let past = if state.len > 0 {
                Some(KvPair {
                    k: g.constant(state.k[i].clone()),
                    v: g.constant(state.v[i].clone()),
                })
            } else {
                None
            };
            let ckv = match &state.cross {
                Some(c) => Some(KvPair {
                    k: g.constant(c[i].0.clone()),
                    v: g.constant(c[i].1.clone()),
                }),
                None => None,
            };
            let cross = match (&ckv, &cross_segs) {
                (Some(kv), Some(s)) => Some((kv, s)),
                _ => None,
            };
            let (out, kv) = b.forward(&mut g, h, &ctx, past, cross)?;
            h = out;
            new_k.push(g.value(kv.k).clone());
            new_v.push(g.value(kv.v).clone());
        }
        let last = g.gather_rows(h, &[n - 1])?;
        let gain = g.param(self.norm);
        let last = g.rmsnorm(last, gain, self.cfg.norm_eps)?;
        let logits = self.head.forward(&mut g, last)?;
        let logits = g.value(logits).reshape(&[self.cfg.vocab_size])?;
        Ok((
            logits,
            DecodeState {
                mask: state.mask,
                len: total,
                k: new_k,
                v: new_v,
                cross: state.cross.clone(),
            },
        ))
    }

    /// Embedding rows for `ids` outside any graph.
    pub fn embed_rows<T: Scalar>(&self, store: &ParamStore<T>, ids: &[usize]) -> Result<Tensor<T>> {
        let table = store.tensor(self.embed);
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::Shape(format!("token {bad} outside vocabulary")));
        }
        Ok(table.gather_rows(ids))
    }

    /// Attention projections of every layer (the LoRA targets).
    pub fn attention_linears_mut(&mut self) -> Vec<&mut Linear> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.attention_linears_mut())
            .collect()
    }

    pub fn attention_linears(&self) -> Vec<&Linear> {
        self.blocks.iter().flat_map(|b| b.attn.linears()).collect()
    }
}

/// Cached keys/values of every layer for the positions fed so far.
#[derive(Debug, Clone)]
pub struct DecodeState<T> {
    pub mask: AttentionMask,
    pub len: usize,
    k: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    cross: Option<Rc<Vec<(Tensor<T>, Tensor<T>)>>>,
}
