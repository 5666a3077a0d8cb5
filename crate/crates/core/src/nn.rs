//! Network building blocks shared by every model: linear layers (with an
//! optional low-rank adapter), pre-norm transformer blocks, a sinusoidal
//! encoder stack and the strided convolution frontends.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::attention::{AttnDims, AttnSegment};
use crate::error::{Error, Result};
use crate::graph::{conv_out_len, Graph, Var};
use crate::kernels::RopeTable;
use crate::mask::AttentionMask;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Contiguous block of rows belonging to one sequence in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Spans for sequences of the given lengths packed back to back.
pub fn pack(lens: &[usize]) -> Vec<Span> {
    let mut start = 0;
    lens.iter()
        .map(|&len| {
            let s = Span::new(start, len);
            start += len;
            s
        })
        .collect()
}

pub(crate) fn gaussian<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, std, rng)
}

/// Low-rank pair added to a frozen projection: `x W + scale * (x A) B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<LoraPair>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weight `[d_in, d_out]` drawn from N(0, 1/d_in); bias starts at zero.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(&format!("{name}.weight"), gaussian(&[d_in, d_out], std, rng), false)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[d_out]), false)?)
        } else {
            None
        };
        Ok(Self {
            name: name.into(),
            weight,
            bias,
            lora: None,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.add(y, b)?;
        }
        if let Some(l) = &self.lora {
            let a = g.param(l.a);
            let xa = g.matmul(x, a)?;
            let b = g.param(l.b);
            let delta = g.matmul(xa, b)?;
            let delta = g.scale(delta, T::from_f64(l.scale));
            y = g.add(y, delta)?;
        }
        Ok(y)
    }
}

/// Shape of one transformer layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub norm_eps: f64,
    /// Adds a cross-attention sub-layer between self-attention and the FFN.
    pub cross: bool,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ffn == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> AttnDims {
        AttnDims {
            heads: self.heads,
            head_dim: self.dim / self.heads,
        }
    }

    /// Parameters in one layer: four attention projections, gated FFN and
    /// norm gains (plus the cross-attention sub-layer when enabled).
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.dim, self.ffn);
        let base = 4 * d * d + 3 * d * f + 2 * d;
        if self.cross {
            base + 4 * d * d + d
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnProj {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl AttnProj {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), d, d, false, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), d, d, false, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), d, d, false, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), d, d, false, rng)?,
        })
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }

    pub fn linears(&self) -> [&Linear; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }
}

/// Keys and values of one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct KvPair {
    pub k: Var,
    pub v: Var,
}

/// Self-attention layout for one forward call over packed rows.
#[derive(Clone)]
pub struct SelfAttnCtx<T> {
    pub segs: Rc<[AttnSegment]>,
    /// Rotary positions of the rows being processed, if the stack uses RoPE.
    pub rope: Option<(Rc<[usize]>, Rc<RopeTable<T>>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub cfg: BlockConfig,
    pub attn_norm: ParamId,
    pub attn: AttnProj,
    pub cross_norm: Option<ParamId>,
    pub cross: Option<AttnProj>,
    pub ffn_norm: ParamId,
    pub w_gate: Linear,
    pub w_up: Linear,
    pub w_down: Linear,
}

impl Block {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let ones = || Tensor::full(&[d], T::one());
        let attn_norm = store.add(&format!("{name}.attn_norm"), ones(), false)?;
        let attn = AttnProj::new(store, &format!("{name}.attn"), d, rng)?;
        let (cross_norm, cross) = if cfg.cross {
            (
                Some(store.add(&format!("{name}.cross_norm"), ones(), false)?),
                Some(AttnProj::new(store, &format!("{name}.cross"), d, rng)?),
            )
        } else {
            (None, None)
        };
        let ffn_norm = store.add(&format!("{name}.ffn_norm"), ones(), false)?;
        Ok(Self {
            cfg,
            attn_norm,
            attn,
            cross_norm,
            cross,
            ffn_norm,
            w_gate: Linear::new(store, &format!("{name}.ffn.w_gate"), d, cfg.ffn, false, rng)?,
            w_up: Linear::new(store, &format!("{name}.ffn.w_up"), d, cfg.ffn, false, rng)?,
            w_down: Linear::new(store, &format!("{name}.ffn.w_down"), cfg.ffn, d, false, rng)?,
        })
    }

    /// Cross-attention keys and values for an encoder memory.
    pub fn cross_kv<T: Scalar>(&self, g: &mut Graph<'_, T>, memory: Var) -> Result<KvPair> {
        let proj = self
            .cross
            .as_ref()
            .ok_or_else(|| Error::Contract("block has no cross-attention".into()))?;
        Ok(KvPair {
            k: proj.wk.forward(g, memory)?,
            v: proj.wv.forward(g, memory)?,
        })
    }

    /// One pre-norm layer. With `past`, the new rows' keys/values are
    /// appended to the cached ones; the returned pair covers all keys seen.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        ctx: &SelfAttnCtx<T>,
        past: Option<KvPair>,
        cross: Option<(&KvPair, &Rc<[AttnSegment]>)>,
    ) -> Result<(Var, KvPair)> {
        let eps = self.cfg.norm_eps;
        let dims = self.cfg.dims();
        let gain = g.param(self.attn_norm);
        let h = g.rmsnorm(x, gain, eps)?;
        let mut q = self.attn.wq.forward(g, h)?;
        let mut k = self.attn.wk.forward(g, h)?;
        let v = self.attn.wv.forward(g, h)?;
        if let Some((pos, table)) = &ctx.rope {
            q = rope_heads(g, q, pos, table, dims)?;
            k = rope_heads(g, k, pos, table, dims)?;
        }
        let kv = match past {
            Some(p) => KvPair {
                k: g.concat_rows(&[p.k, k])?,
                v: g.concat_rows(&[p.v, v])?,
            },
            None => KvPair { k, v },
        };
        let a = g.attention(q, kv.k, kv.v, ctx.segs.clone(), dims)?;
        let a = self.attn.wo.forward(g, a)?;
        let mut x = g.add(x, a)?;

        if let (Some(proj), Some(norm)) = (&self.cross, self.cross_norm) {
            let (ckv, segs) =
                cross.ok_or_else(|| Error::Contract("cross-attention block needs an encoder memory".into()))?;
            let gain = g.param(norm);
            let h = g.rmsnorm(x, gain, eps)?;
            let q = proj.wq.forward(g, h)?;
            let a = g.attention(q, ckv.k, ckv.v, segs.clone(), dims)?;
            let a = proj.wo.forward(g, a)?;
            x = g.add(x, a)?;
        }

        let gain = g.param(self.ffn_norm);
        let h = g.rmsnorm(x, gain, eps)?;
        let gate = self.w_gate.forward(g, h)?;
        let gate = g.silu(gate);
        let up = self.w_up.forward(g, h)?;
        let act = g.mul(gate, up)?;
        let f = self.w_down.forward(g, act)?;
        Ok((g.add(x, f)?, kv))
    }

    pub fn attention_linears_mut(&mut self) -> [&mut Linear; 4] {
        self.attn.linears_mut()
    }
}

/// Apply RoPE per head: `[rows, heads*hd]` is viewed as `[rows*heads, hd]`.
fn rope_heads<T: Scalar>(
    g: &mut Graph<'_, T>,
    a: Var,
    positions: &Rc<[usize]>,
    table: &Rc<RopeTable<T>>,
    dims: AttnDims,
) -> Result<Var> {
    let rows = positions.len();
    let flat = g.reshape(a, &[rows * dims.heads, dims.head_dim])?;
    let per_head: Rc<[usize]> = positions
        .iter()
        .flat_map(|&p| core::iter::repeat_n(p, dims.heads))
        .collect();
    let r = g.rope(flat, per_head, table.clone())?;
    g.reshape(r, &[rows, dims.heads * dims.head_dim])
}

/// Sinusoidal absolute position table, one row per position.
pub fn sinusoidal<T: Scalar>(positions: &[usize], dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[positions.len().max(1), dim], |i| {
        let (r, c) = (i / dim, i % dim);
        let pos = positions.get(r).copied().unwrap_or(0) as f64;
        let freq = Float::powf(10000.0f64, -((c - c % 2) as f64) / dim as f64);
        let angle = pos * freq;
        T::from_f64(if c % 2 == 0 { Float::sin(angle) } else { Float::cos(angle) })
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub norm_eps: f64,
}

impl EncoderConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.dim,
            heads: self.heads,
            ffn: self.ffn,
            norm_eps: self.norm_eps,
            cross: false,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers * self.block().param_count() + self.dim
    }
}

/// Bidirectional transformer stack with sinusoidal positions and a final
/// norm. Sequences in a packed batch never attend across spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub blocks: Vec<Block>,
    pub norm: ParamId,
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, &format!("{name}.layers.{i}"), cfg.block(), rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = store.add(&format!("{name}.norm"), Tensor::full(&[cfg.dim], T::one()), false)?;
        Ok(Self { cfg, blocks, norm })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, spans: &[Span]) -> Result<Var> {
        let rows = g.value(x).rows_cols().0;
        if spans.last().map(|s| s.end()) != Some(rows) {
            return Err(Error::Shape(format!("encoder spans do not cover {rows} rows")));
        }
        let positions: Vec<usize> = spans.iter().flat_map(|s| 0..s.len).collect();
        let pe = g.constant(sinusoidal(&positions, self.cfg.dim));
        let mut h = g.add(x, pe)?;
        let ctx = SelfAttnCtx {
            segs: spans
                .iter()
                .map(|s| AttnSegment::self_attn(s.start, s.len, AttentionMask::Full))
                .collect(),
            rope: None,
        };
        for b in &self.blocks {
            h = b.forward(g, h, &ctx, None, None)?.0;
        }
        let gain = g.param(self.norm);
        g.rmsnorm(h, gain, self.cfg.norm_eps)
    }
}

/// Two stride-2 3x3 convolutions over (time, feature) followed by a linear
/// map to the model width: 4x time reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFrontend {
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub proj: Linear,
    pub channels: usize,
    pub feature_dim: usize,
}

impl ConvFrontend {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        feature_dim: usize,
        channels: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if feature_dim == 0 || channels == 0 {
            return Err(Error::Config("conv frontend sizes must be positive".into()));
        }
        let mut conv = |idx: usize, cin: usize, store: &mut ParamStore<T>| -> Result<(ParamId, ParamId)> {
            let std = 1.0 / ((cin * 9) as f64).sqrt();
            let w = store.add(&format!("{name}.conv{idx}.weight"), gaussian(&[channels, cin, 3, 3], std, rng), false)?;
            let b = store.add(&format!("{name}.conv{idx}.bias"), Tensor::zeros(&[channels]), false)?;
            Ok((w, b))
        };
        let conv1 = conv(1, 1, store)?;
        let conv2 = conv(2, channels, store)?;
        let reduced = Self::reduced(Self::reduced(feature_dim));
        let proj = Linear::new(store, &format!("{name}.proj"), channels * reduced, dim, true, rng)?;
        Ok(Self {
            conv1,
            conv2,
            proj,
            channels,
            feature_dim,
        })
    }

    /// Length after one stride-2 layer: `ceil(len / 2)`.
    pub fn reduced(len: usize) -> usize {
        conv_out_len(len, 3, 2, 1)
    }

    pub fn out_len(frames: usize) -> usize {
        Self::reduced(Self::reduced(frames))
    }

    /// `features: [T, F]` for one utterance → `[ceil(ceil(T/2)/2), dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let s = g.shape(features).to_vec();
        if s.len() != 2 || s[1] != self.feature_dim {
            return Err(Error::Shape(format!(
                "frontend expects [frames, {}], got {s:?}",
                self.feature_dim
            )));
        }
        let x = g.reshape(features, &[1, s[0], s[1]])?;
        let (w, b) = (g.param(self.conv1.0), g.param(self.conv1.1));
        let x = g.conv2d(x, w, b, 2, 1)?;
        let x = g.silu(x);
        let (w, b) = (g.param(self.conv2.0), g.param(self.conv2.1));
        let x = g.conv2d(x, w, b, 2, 1)?;
        let x = g.silu(x);
        // [C, T', F'] -> [T', C * F']
        let x = g.swap01(x)?;
        let sh = g.shape(x).to_vec();
        let x = g.reshape(x, &[sh[0], sh[1] * sh[2]])?;
        self.proj.forward(g, x)
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        (c * 9 + c) + (c * c * 9 + c) + self.proj.d_in * self.proj.d_out + self.proj.d_out
    }
}

/// Stack of stride-2, kernel-3 1-D convolutions over time at constant width.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dStack {
    pub layers: Vec<(ParamId, ParamId)>,
    pub dim: usize,
}

impl Conv1dStack {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        layers: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / ((dim * 3) as f64).sqrt();
        let layers = (0..layers)
            .map(|i| {
                let w = store.add(&format!("{name}.conv1d{i}.weight"), gaussian(&[dim, dim, 3], std, rng), false)?;
                let b = store.add(&format!("{name}.conv1d{i}.bias"), Tensor::zeros(&[dim]), false)?;
                Ok((w, b))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, dim })
    }

    pub fn out_len(&self, mut frames: usize) -> usize {
        for _ in &self.layers {
            frames = conv_out_len(frames, 3, 2, 1);
        }
        frames
    }

    /// `[t, dim] -> [t', dim]`; SiLU between layers, none after the last.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.silu(x);
            }
            let (w, b) = (g.param(w), g.param(b));
            x = g.conv1d(x, w, b, 2, 1)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(cross: bool) -> BlockConfig {
        BlockConfig {
            dim: 8,
            heads: 2,
            ffn: 12,
            norm_eps: 1e-5,
            cross,
        }
    }

    #[test]
    fn block_param_count_matches_registry() {
        for cross in [false, true] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            Block::new(&mut store, "b", cfg(cross), &mut rng).unwrap();
            assert_eq!(store.total_count(), cfg(cross).param_count());
        }
    }

    #[test]
    fn frontend_lengths() {
        assert_eq!(ConvFrontend::out_len(40), 10);
        assert_eq!(ConvFrontend::out_len(41), 11);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fe = ConvFrontend::new(&mut store, "fe", 6, 3, 5, &mut rng).unwrap();
        assert_eq!(store.total_count(), fe.param_count());
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::randn(&[13, 6], 1.0, &mut rng));
        let y = fe.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[4, 5]);
    }

    #[test]
    fn conv1d_stack_reduces_by_eight() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let st = Conv1dStack::new(&mut store, "c", 3, 4, &mut rng).unwrap();
        for t in [1, 8, 9, 16, 17, 40] {
            let mut g = Graph::new(&store);
            let x = g.constant(Tensor::randn(&[t, 4], 1.0, &mut rng));
            let y = st.forward(&mut g, x).unwrap();
            assert_eq!(g.shape(y)[0], t.div_ceil(8));
            assert_eq!(st.out_len(t), t.div_ceil(8));
        }
    }

    #[test]
    fn cross_block_grad_check() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = Block::new(&mut store, "b", cfg(true), &mut rng).unwrap();
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mem = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let table = Rc::new(RopeTable::new(4, 10000.0, 8));
        let report = grad_check(
            &mut store,
            |g| {
                let xv = g.constant(x.clone());
                let m = g.constant(mem.clone());
                let kv = block.cross_kv(g, m)?;
                let ctx = SelfAttnCtx {
                    segs: Rc::from([AttnSegment::self_attn(0, 5, AttentionMask::Causal)]),
                    rope: Some((Rc::from([0, 1, 2, 3, 4]), table.clone())),
                };
                let segs: Rc<[AttnSegment]> = Rc::from([AttnSegment::cross(0, 5, 0, 3)]);
                let (y, _) = block.forward(g, xv, &ctx, None, Some((&kv, &segs)))?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                Ok(g.sum(p))
            },
            1e-5,
            Some(12),
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn sinusoidal_row_zero() {
        let pe = sinusoidal::<f64>(&[0, 3], 6);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.row(1)[0] - 3f64.sin()).abs() < 1e-12);
    }
}
