//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`]; frozen parameters enter the tape as
//! constants, so no gradient is ever computed for them. [`Graph::backward`]
//! walks the tape in reverse and returns the gradients of trainable
//! parameters.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{self, AttnDims, AttnSegment};
use crate::error::{Error, Result};
use crate::kernels::{self, RopeTable};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::{numel, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, b_shared: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: T },
    Silu { a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LogSumExp { a: Var },
    RmsNorm { x: Var, gain: Var, inv: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, ignore: usize, count: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: Conv2dGeom },
    Conv1d { x: Var, w: Var, b: Var, geom: Conv1dGeom },
    Attention { q: Var, k: Var, v: Var, segs: Rc<[AttnSegment]>, dims: AttnDims, probs: Vec<T> },
    Rope { a: Var, positions: Rc<[usize]>, table: Rc<RopeTable<T>> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { a: Var, idx: Vec<usize> },
    Reshape { a: Var },
    Swap01 { a: Var, dims: [usize; 3] },
    Sum { a: Var },
    Ctc { lp: Var, grad: Tensor<T> },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy)]
struct Conv2dGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Conv1dGeom {
    cin: usize,
    cout: usize,
    t: usize,
    ot: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

/// Output length of a strided convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad).saturating_sub(kernel) / stride + 1
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.tensor(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let frozen = self.params.get(id).frozen;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: !frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Matrix product. `a: [.., m, k]`, `b: [k, n]` (shared) or `[.., k, n]`
    /// with identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Shape(alloc::format!("matmul {sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let lead_a = &sa[..sa.len() - 2];
        let b_shared = sb.len() == 2;
        if !b_shared && lead_a != &sb[..sb.len() - 2] {
            return Err(err());
        }
        let batch = numel(lead_a);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            if b_shared {
                kernels::matmul_acc(av, bv, batch * m, k, n, &mut out);
            } else {
                for i in 0..batch {
                    kernels::matmul_acc(
                        &av[i * m * k..],
                        &bv[i * k * n..],
                        m,
                        k,
                        n,
                        &mut out[i * m * n..],
                    );
                }
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, batch, m, k, n, b_shared },
            rg,
        ))
    }

    /// Elementwise sum; `b`'s shape must equal a trailing suffix of `a`'s
    /// (broadcast over leading dimensions only).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(alloc::format!("add {sa:?} + {sb:?}")));
        }
        let shape = sa.to_vec();
        let bv = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_exact_mut(bv.len()) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o += y;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(alloc::format!(
                "mul {:?} * {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.shape(a).to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let t = self.value(a).scale(k);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale { a, k }, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::silu);
        let rg = self.rg(&[a]);
        self.push(t, Op::Silu { a }, rg)
    }

    fn rowwise(&self, a: Var, f: impl Fn(&mut [T])) -> Tensor<T> {
        let mut t = self.value(a).clone();
        let (_, c) = t.rows_cols();
        for row in t.data_mut().chunks_exact_mut(c) {
            f(row);
        }
        t
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.rowwise(a, kernels::softmax_inplace);
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax { a }, rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.rowwise(a, kernels::log_softmax_inplace);
        let rg = self.rg(&[a]);
        self.push(t, Op::LogSoftmax { a }, rg)
    }

    /// Log-sum-exp over the last axis; the result drops that axis.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (_, c) = src.rows_cols();
        let data: Vec<T> = src.data().chunks_exact(c).map(kernels::logsumexp).collect();
        let shape = src.shape()[..src.ndim().saturating_sub(1)].to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, data), Op::LogSumExp { a }, rg)
    }

    /// RMS normalisation over the last axis with a learned gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (_, c) = self.value(x).rows_cols();
        if self.shape(gain) != [c] {
            return Err(Error::Shape(alloc::format!(
                "rmsnorm gain {:?} for width {c}",
                self.shape(gain)
            )));
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let mut out = vec![T::zero(); src.numel()];
        let mut inv = Vec::with_capacity(src.numel() / c);
        for (row, orow) in src.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            inv.push(kernels::rmsnorm_row(row, g, T::from_f64(eps), orow));
        }
        let shape = src.shape().to_vec();
        let rg = self.rg(&[x, gain]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::RmsNorm { x, gain, inv }, rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = (t.shape()[0], t.rows_cols().1);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Shape(alloc::format!("token {bad} outside vocabulary {vocab}")));
        }
        if ids.is_empty() {
            return Err(Error::Empty("embedding lookup of no ids".into()));
        }
        let out = t.gather_rows(ids);
        debug_assert_eq!(out.shape()[1], d);
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Mean token cross-entropy over rows whose target is not `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let lg = self.value(logits);
        let (rows, v) = lg.rows_cols();
        if targets.len() != rows {
            return Err(Error::Shape(alloc::format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        let mut total = T::zero();
        let mut count = 0;
        for (row, &t) in lg.data().chunks_exact(v).zip(targets) {
            if t == ignore {
                continue;
            }
            if t >= v {
                return Err(Error::Shape(alloc::format!("target {t} outside vocabulary {v}")));
            }
            total += kernels::logsumexp(row) - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::NoLossPositions);
        }
        let loss = total / T::from_f64(count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, count },
            rg,
        ))
    }

    /// 2-D convolution. `x: [cin, h, w]`, `w: [cout, cin, k, k]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::Shape(alloc::format!("conv2d input {sx:?} kernel {sw:?}")));
        }
        if self.shape(b) != [sw[0]] {
            return Err(Error::Shape("conv2d bias".into()));
        }
        let k = sw[2];
        let g = Conv2dGeom {
            cin: sx[0],
            cout: sw[0],
            h: sx[1],
            w: sx[2],
            oh: conv_out_len(sx[1], k, stride, pad),
            ow: conv_out_len(sx[2], k, stride, pad),
            k,
            stride,
            pad,
        };
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); g.cout * g.oh * g.ow];
        for co in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = bv[co];
                    g.taps(oy, ox, |ci, ky, kx, iy, ix| {
                        acc += wv[((co * g.cin + ci) * k + ky) * k + kx] * xv[(ci * g.h + iy) * g.w + ix];
                    });
                    out[(co * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor::from_parts(vec![g.cout, g.oh, g.ow], out),
            Op::Conv2d { x, w, b, geom: g },
            rg,
        ))
    }

    /// 1-D convolution over time. `x: [t, cin]`, `w: [cout, cin, k]`, `b: [cout]`;
    /// output `[t', cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] || self.shape(b) != [sw[0]] {
            return Err(Error::Shape(alloc::format!("conv1d input {sx:?} kernel {sw:?}")));
        }
        let g = Conv1dGeom {
            cin: sx[1],
            cout: sw[0],
            t: sx[0],
            ot: conv_out_len(sx[0], sw[2], stride, pad),
            k: sw[2],
            stride,
            pad,
        };
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); g.ot * g.cout];
        for ot in 0..g.ot {
            for co in 0..g.cout {
                let mut acc = bv[co];
                g.taps(ot, |kk, it| {
                    for ci in 0..g.cin {
                        acc += wv[(co * g.cin + ci) * g.k + kk] * xv[it * g.cin + ci];
                    }
                });
                out[ot * g.cout + co] = acc;
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor::from_parts(vec![g.ot, g.cout], out),
            Op::Conv1d { x, w, b, geom: g },
            rg,
        ))
    }

    /// Multi-head attention over packed segments. `q`, `k`, `v` are matrices
    /// whose width is `dims.heads * dims.head_dim`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segs: Rc<[AttnSegment]>,
        dims: AttnDims,
    ) -> Result<Var> {
        let w = dims.heads * dims.head_dim;
        let (qr, qc) = self.value(q).rows_cols();
        let (kr, kc) = self.value(k).rows_cols();
        if qc != w || kc != w || self.shape(v) != self.shape(k) {
            return Err(Error::Shape(alloc::format!(
                "attention q {:?} k {:?} v {:?} for width {w}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        for s in segs.iter() {
            if s.q_start + s.q_len > qr || s.kv_start + s.kv_len > kr {
                return Err(Error::Shape("attention segment out of range".into()));
            }
        }
        let (out, probs) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            qr,
            &segs,
            dims,
        );
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![qr, w], out),
            Op::Attention { q, k, v, segs, dims, probs },
            rg,
        ))
    }

    /// Rotary position embedding of every row of `a` (one position per row).
    pub fn rope(&mut self, a: Var, positions: Rc<[usize]>, table: Rc<RopeTable<T>>) -> Result<Var> {
        let (rows, _) = self.value(a).rows_cols();
        if positions.len() != rows {
            return Err(Error::Shape("rope needs one position per row".into()));
        }
        if positions.iter().any(|&p| p >= table.positions()) {
            return Err(Error::Shape("rope position beyond table".into()));
        }
        let mut t = self.value(a).clone();
        for (r, &p) in positions.iter().enumerate() {
            table.rotate(t.row_mut(r), p, false);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Rope { a, positions, table }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&vals)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (rows, _) = self.value(a).rows_cols();
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::Shape("gather_rows index out of range".into()));
        }
        let t = self.value(a).gather_rows(idx);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::GatherRows { a, idx: idx.to_vec() }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// `[d0, d1, d2] -> [d1, d0, d2]`.
    pub fn swap01(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(Error::Shape(alloc::format!("swap01 needs rank 3, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2]];
        let out = swap01_data(self.value(a).data(), dims);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![dims[1], dims[0], dims[2]], out),
            Op::Swap01 { a, dims },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// CTC negative log-likelihood of `target` given per-frame log-probabilities
    /// `[frames, classes]` (blank at class 0).
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize]) -> Result<Var> {
        let lp = self.value(log_probs);
        let (t, c) = lp.rows_cols();
        let (loss, grad) = crate::ctc::ctc_forward_backward(lp.data(), t, c, target)?;
        let rg = self.rg(&[log_probs]);
        let grad = Tensor::from_parts(vec![t, c], grad);
        Ok(self.push(Tensor::scalar(loss), Op::Ctc { lp: log_probs, grad }, rg))
    }

    /// Reverse pass from a scalar. Returns gradients of every reachable
    /// trainable parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Value::Param(id) = node.value {
                out.entries.insert(id, g);
                continue;
            }
            self.backward_node(Var(i), &node.op, &g, &mut grads);
        }
        Ok(out)
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backward_node(&self, me: Var, op: &Op<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n, b_shared } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.buf(grads, a) {
                    if b_shared {
                        kernels::matmul_nt_acc(gd, bv, batch * m, n, k, da);
                    } else {
                        for i in 0..batch {
                            kernels::matmul_nt_acc(
                                &gd[i * m * n..],
                                &bv[i * k * n..],
                                m,
                                n,
                                k,
                                &mut da[i * m * k..],
                            );
                        }
                    }
                }
                if let Some(db) = self.buf(grads, b) {
                    if b_shared {
                        kernels::matmul_tn_acc(av, gd, k, batch * m, n, db);
                    } else {
                        for i in 0..batch {
                            kernels::matmul_tn_acc(
                                &av[i * m * k..],
                                &gd[i * m * n..],
                                k,
                                m,
                                n,
                                &mut db[i * k * n..],
                            );
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(da) = self.buf(grads, a) {
                    for (o, &x) in da.iter_mut().zip(gd) {
                        *o += x;
                    }
                }
                if let Some(db) = self.buf(grads, b) {
                    for chunk in gd.chunks_exact(db.len()) {
                        for (o, &x) in db.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if let Some(da) = self.buf(grads, a) {
                    for ((o, &x), &y) in da.iter_mut().zip(gd).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(db) = self.buf(grads, b) {
                    for ((o, &x), &y) in db.iter_mut().zip(gd).zip(av) {
                        *o += x * y;
                    }
                }
            }
            &Op::Scale { a, k } => {
                if let Some(da) = self.buf(grads, a) {
                    for (o, &x) in da.iter_mut().zip(gd) {
                        *o += x * k;
                    }
                }
            }
            &Op::Silu { a } => {
                let av = self.value(a).data();
                if let Some(da) = self.buf(grads, a) {
                    for ((o, &x), &gy) in da.iter_mut().zip(av).zip(gd) {
                        let sg = kernels::sigmoid(x);
                        *o += gy * (sg + x * sg * (T::one() - sg));
                    }
                }
            }
            &Op::Softmax { a } => {
                let yv = self.value(me).data();
                let (_, c) = g.rows_cols();
                if let Some(da) = self.buf(grads, a) {
                    for ((o, yr), gr) in da.chunks_exact_mut(c).zip(yv.chunks_exact(c)).zip(gd.chunks_exact(c)) {
                        let s = kernels::dot(yr, gr);
                        for ((o, &yy), &gg) in o.iter_mut().zip(yr).zip(gr) {
                            *o += yy * (gg - s);
                        }
                    }
                }
            }
            &Op::LogSoftmax { a } => {
                let yv = self.value(me).data();
                let (_, c) = g.rows_cols();
                if let Some(da) = self.buf(grads, a) {
                    for ((o, yr), gr) in da.chunks_exact_mut(c).zip(yv.chunks_exact(c)).zip(gd.chunks_exact(c)) {
                        let s: T = gr.iter().copied().sum();
                        for ((o, &yy), &gg) in o.iter_mut().zip(yr).zip(gr) {
                            *o += gg - yy.exp() * s;
                        }
                    }
                }
            }
            &Op::LogSumExp { a } => {
                let av = self.value(a).data();
                let (_, c) = self.value(a).rows_cols();
                if let Some(da) = self.buf(grads, a) {
                    for (r, (o, x)) in da.chunks_exact_mut(c).zip(av.chunks_exact(c)).enumerate() {
                        let l = kernels::logsumexp(x);
                        for (o, &xx) in o.iter_mut().zip(x) {
                            *o += gd[r] * (xx - l).exp();
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let (xv, gv) = (self.value(*x).data(), self.value(*gain).data());
                let c = gv.len();
                let n = T::from_f64(c as f64);
                if let Some(dg) = self.buf(grads, *gain) {
                    for ((xr, gr), &iv) in xv.chunks_exact(c).zip(gd.chunks_exact(c)).zip(inv) {
                        for ((o, &xx), &gg) in dg.iter_mut().zip(xr).zip(gr) {
                            *o += gg * xx * iv;
                        }
                    }
                }
                if let Some(dx) = self.buf(grads, *x) {
                    for (((o, xr), gr), &iv) in dx
                        .chunks_exact_mut(c)
                        .zip(xv.chunks_exact(c))
                        .zip(gd.chunks_exact(c))
                        .zip(inv)
                    {
                        let mut s = T::zero();
                        for ((&gg, &ga), &xx) in gr.iter().zip(gv).zip(xr) {
                            s += gg * ga * xx;
                        }
                        let coef = iv * iv * iv * s / n;
                        for (((o, &gg), &ga), &xx) in o.iter_mut().zip(gr).zip(gv).zip(xr) {
                            *o += iv * gg * ga - coef * xx;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (_, d) = g.rows_cols();
                if let Some(dt) = self.buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &x) in dt[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, ignore, count } => {
                let lv = self.value(*logits);
                let (_, v) = lv.rows_cols();
                let scale = gd[0] / T::from_f64(*count as f64);
                if let Some(dl) = self.buf(grads, *logits) {
                    for ((o, row), &t) in dl.chunks_exact_mut(v).zip(lv.data().chunks_exact(v)).zip(targets) {
                        if t == *ignore {
                            continue;
                        }
                        let l = kernels::logsumexp(row);
                        for (j, (o, &x)) in o.iter_mut().zip(row).enumerate() {
                            let p = (x - l).exp();
                            *o += scale * (p - if j == t { T::one() } else { T::zero() });
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, b, geom: gm } => {
                let (xv, wv) = (self.value(x).data(), self.value(w).data());
                let k = gm.k;
                if let Some(db) = self.buf(grads, b) {
                    for co in 0..gm.cout {
                        let s: T = gd[co * gm.oh * gm.ow..(co + 1) * gm.oh * gm.ow].iter().copied().sum();
                        db[co] += s;
                    }
                }
                if let Some(dw) = self.buf(grads, w) {
                    for co in 0..gm.cout {
                        for oy in 0..gm.oh {
                            for ox in 0..gm.ow {
                                let gy = gd[(co * gm.oh + oy) * gm.ow + ox];
                                gm.taps(oy, ox, |ci, ky, kx, iy, ix| {
                                    dw[((co * gm.cin + ci) * k + ky) * k + kx] += gy * xv[(ci * gm.h + iy) * gm.w + ix];
                                });
                            }
                        }
                    }
                }
                if let Some(dx) = self.buf(grads, x) {
                    for co in 0..gm.cout {
                        for oy in 0..gm.oh {
                            for ox in 0..gm.ow {
                                let gy = gd[(co * gm.oh + oy) * gm.ow + ox];
                                gm.taps(oy, ox, |ci, ky, kx, iy, ix| {
                                    dx[(ci * gm.h + iy) * gm.w + ix] += gy * wv[((co * gm.cin + ci) * k + ky) * k + kx];
                                });
                            }
                        }
                    }
                }
            }
            &Op::Conv1d { x, w, b, geom: gm } => {
                let (xv, wv) = (self.value(x).data(), self.value(w).data());
                if let Some(db) = self.buf(grads, b) {
                    for row in gd.chunks_exact(gm.cout) {
                        for (o, &x) in db.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
                if let Some(dw) = self.buf(grads, w) {
                    for ot in 0..gm.ot {
                        for co in 0..gm.cout {
                            let gy = gd[ot * gm.cout + co];
                            gm.taps(ot, |kk, it| {
                                for ci in 0..gm.cin {
                                    dw[(co * gm.cin + ci) * gm.k + kk] += gy * xv[it * gm.cin + ci];
                                }
                            });
                        }
                    }
                }
                if let Some(dx) = self.buf(grads, x) {
                    for ot in 0..gm.ot {
                        for co in 0..gm.cout {
                            let gy = gd[ot * gm.cout + co];
                            gm.taps(ot, |kk, it| {
                                for ci in 0..gm.cin {
                                    dx[it * gm.cin + ci] += gy * wv[(co * gm.cin + ci) * gm.k + kk];
                                }
                            });
                        }
                    }
                }
            }
            Op::Attention { q, k, v, segs, dims, probs } => {
                // Split borrows: each input gets its own buffer; q/k/v may alias
                // only if the caller passed the same var twice, which the
                // model code never does.
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = self.buf(grads, *q).map(|s| s.to_vec());
                let mut dk = self.buf(grads, *k).map(|s| s.to_vec());
                let mut dv = self.buf(grads, *v).map(|s| s.to_vec());
                attention::backward(
                    qv,
                    kv,
                    vv,
                    probs,
                    gd,
                    segs,
                    *dims,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let (Some(buf), Some(slot)) = (buf, grads[var.0].as_mut()) {
                        slot.data_mut().copy_from_slice(&buf);
                    }
                }
            }
            Op::Rope { a, positions, table } => {
                if let Some(da) = self.buf(grads, *a) {
                    let (_, c) = g.rows_cols();
                    let mut row = vec![T::zero(); c];
                    for (r, &p) in positions.iter().enumerate() {
                        row.copy_from_slice(&gd[r * c..(r + 1) * c]);
                        table.rotate(&mut row, p, true);
                        for (o, &x) in da[r * c..(r + 1) * c].iter_mut().zip(&row) {
                            *o += x;
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(dp) = self.buf(grads, p) {
                        for (o, &x) in dp.iter_mut().zip(&gd[off..off + n]) {
                            *o += x;
                        }
                    }
                    off += n;
                }
            }
            Op::GatherRows { a, idx } => {
                let (_, c) = g.rows_cols();
                if let Some(da) = self.buf(grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &x) in da[i * c..(i + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                            *o += x;
                        }
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(da) = self.buf(grads, a) {
                    for (o, &x) in da.iter_mut().zip(gd) {
                        *o += x;
                    }
                }
            }
            &Op::Swap01 { a, dims } => {
                if let Some(da) = self.buf(grads, a) {
                    let back = swap01_data(gd, [dims[1], dims[0], dims[2]]);
                    for (o, x) in da.iter_mut().zip(back) {
                        *o += x;
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(da) = self.buf(grads, a) {
                    for o in da.iter_mut() {
                        *o += gd[0];
                    }
                }
            }
            Op::Ctc { lp, grad } => {
                if let Some(dl) = self.buf(grads, *lp) {
                    for (o, &x) in dl.iter_mut().zip(grad.data()) {
                        *o += gd[0] * x;
                    }
                }
            }
        }
    }
}

fn swap01_data<T: Scalar>(src: &[T], [d0, d1, d2]: [usize; 3]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..d0 {
        for j in 0..d1 {
            out[(j * d0 + i) * d2..(j * d0 + i + 1) * d2]
                .copy_from_slice(&src[(i * d1 + j) * d2..(i * d1 + j + 1) * d2]);
        }
    }
    out
}

impl Conv2dGeom {
    #[inline]
    fn taps(&self, oy: usize, ox: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        for ci in 0..self.cin {
            for ky in 0..self.k {
                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                for kx in 0..self.k {
                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                    if ix < 0 || ix >= self.w as isize {
                        continue;
                    }
                    f(ci, ky, kx, iy as usize, ix as usize);
                }
            }
        }
    }
}

impl Conv1dGeom {
    #[inline]
    fn taps(&self, ot: usize, mut f: impl FnMut(usize, usize)) {
        for kk in 0..self.k {
            let it = (ot * self.stride + kk) as isize - self.pad as isize;
            if it >= 0 && (it as usize) < self.t {
                f(kk, it as usize);
            }
        }
    }
}
