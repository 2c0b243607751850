//! Tape-based reverse-mode differentiation over named parameter tensors,
//! an adaptive-moment optimizer and a central-difference gradient checker.
//!
//! A [`Tape`] borrows a [`ParamSet`] immutably, records every operation of
//! one forward computation and can then be differentiated once from a scalar
//! node. Frozen parameters never receive gradient buffers, and the backward
//! sweep skips any node that does not lead back to a trainable tensor.
//!
//! Sequences of a batch are packed row-wise; attention is block-diagonal and
//! causal within each [`SeqSpan`].

use std::collections::HashMap;
use std::fmt::{Debug, Display};

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, ArrayViewD, Axis, Ix2, IxDyn, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: ArrayD<T>,
    pub trainable: bool,
    grad: Option<ArrayD<T>>,
    m: Option<ArrayD<T>>,
    v: Option<ArrayD<T>>,
}

impl<T: Scalar> ParamEntry<T> {
    pub fn grad(&self) -> Option<&ArrayD<T>> {
        self.grad.as_ref()
    }
}

/// Named tensors with gradient and moment buffers for the trainable ones.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
    has_grads: bool,
    adam_t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            has_grads: false,
            adam_t: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::State(format!("parameter {name} already exists")));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
            grad: None,
            m: None,
            v: None,
        });
        Ok(id)
    }

    /// Remove every parameter whose name satisfies `pred`.
    pub fn remove_where(&mut self, pred: impl Fn(&str) -> bool) {
        self.entries.retain(|e| !pred(&e.name));
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> &ParamEntry<T> {
        &self.entries[id]
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.id(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.id(name).map(move |i| &mut self.entries[i].value)
    }

    pub fn value_mut(&mut self, id: usize) -> &mut ArrayD<T> {
        &mut self.entries[id].value
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for e in &mut self.entries {
            if pred(&e.name) {
                e.trainable = trainable;
                if !trainable {
                    e.grad = None;
                    e.m = None;
                    e.v = None;
                }
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn has_grads(&self) -> bool {
        self.has_grads
    }

    /// Add `scale * g` into the gradient buffers. Trainable tensors the
    /// gradients do not reach still get a zero buffer.
    pub fn accumulate_grads(&mut self, grads: Gradients<T>, scale: T) -> Result<()> {
        if grads.grads.len() != self.entries.len() {
            return Err(Error::State("gradients were recorded against a different parameter set".into()));
        }
        for (e, g) in self.entries.iter_mut().zip(grads.grads) {
            if !e.trainable {
                continue;
            }
            let buf = e.grad.get_or_insert_with(|| ArrayD::zeros(e.value.raw_dim()));
            if let Some(g) = g {
                buf.scaled_add(scale, &g);
            }
        }
        self.has_grads = true;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
        self.has_grads = false;
    }

    /// One bias-corrected adaptive-moment update; clears gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.has_grads {
            return Err(Error::State("optimizer step without gradients".into()));
        }
        self.adam_t += 1;
        let t = self.adam_t as i32;
        let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = T::c(cfg.lr);
        let eps = T::c(cfg.eps);
        let wd = T::c(cfg.weight_decay);
        for e in &mut self.entries {
            if !e.trainable {
                continue;
            }
            let Some(g) = e.grad.take() else { continue };
            let m = e.m.get_or_insert_with(|| ArrayD::zeros(e.value.raw_dim()));
            let v = e.v.get_or_insert_with(|| ArrayD::zeros(e.value.raw_dim()));
            Zip::from(&mut e.value)
                .and(m)
                .and(v)
                .and(&g)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
                });
        }
        self.has_grads = false;
        Ok(())
    }
}

/// Per-parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: usize) -> Option<&ArrayD<T>> {
        self.grads.get(id).and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Rows `offset..offset + len` of a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqSpan {
    pub offset: usize,
    pub len: usize,
}

/// Causal attention probabilities, one `[heads, n, n]` block per sequence.
#[derive(Debug, Clone)]
pub struct AttnBlocks<T> {
    pub heads: usize,
    pub seqs: Vec<SeqSpan>,
    pub blocks: Vec<Array3<T>>,
}

impl<T: Scalar> AttnBlocks<T> {
    fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads,
            seqs: self.seqs.clone(),
            blocks: self.blocks.iter().map(|b| Array3::zeros(b.raw_dim())).collect(),
        }
    }
}

enum Value<T> {
    Param(usize),
    Dense(ArrayD<T>),
    Attn(AttnBlocks<T>),
}

enum Grad<T> {
    Dense(ArrayD<T>),
    Attn(AttnBlocks<T>),
}

enum Op<T> {
    Leaf,
    Gather { table: NodeId, ids: Vec<usize> },
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Array2<T>, rstd: Array1<T> },
    Gelu(NodeId),
    AttnProbs { q: NodeId, k: NodeId },
    AttnApply { probs: NodeId, v: NodeId },
    SmoothCe { logits: NodeId, targets: Vec<(usize, usize)>, eps: T, softmax: Array2<T> },
    AttnFraction { probs: NodeId, seq: usize, head: usize, rows: Vec<usize>, keys: Vec<bool>, num: T, den: T },
    Mean(Vec<NodeId>),
    Affine { x: NodeId, a: T },
}

struct Node<T> {
    op: Op<T>,
    value: Value<T>,
    needs_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

/// Records one forward computation against a borrowed [`ParamSet`].
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, NodeId>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    fn push(&mut self, op: Op<T>, value: Value<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> ArrayViewD<'_, T> {
        match &self.nodes[id.0].value {
            Value::Param(p) => self.params.entries[*p].value.view(),
            Value::Dense(a) => a.view(),
            Value::Attn(_) => panic!("attention node has no dense value"),
        }
    }

    fn mat(&self, id: NodeId) -> ArrayView2<'_, T> {
        self.value(id)
            .into_dimensionality::<Ix2>()
            .expect("rank-2 tensor")
    }

    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "not a scalar node");
        *v.iter().next().expect("one element")
    }

    pub fn attn(&self, id: NodeId) -> &AttnBlocks<T> {
        match &self.nodes[id.0].value {
            Value::Attn(a) => a,
            _ => panic!("not an attention node"),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let pid = self
            .params
            .id(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
        if let Some(&n) = self.param_nodes.get(&pid) {
            return Ok(n);
        }
        let trainable = self.params.entries[pid].trainable;
        let n = self.push(Op::Leaf, Value::Param(pid), trainable);
        self.param_nodes.insert(pid, n);
        Ok(n)
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(Op::Leaf, Value::Dense(value), false)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.mat(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.nrows()) {
            return Err(Error::Encoding(format!("row {bad} outside table of {} rows", t.nrows())));
        }
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(i));
        }
        let ng = self.ng(table);
        Ok(self.push(Op::Gather { table, ids: ids.to_vec() }, Value::Dense(out.into_dyn()), ng))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.mat(a).dot(&self.mat(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), Value::Dense(out.into_dyn()), ng)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let b = self.value(bias).into_dimensionality::<ndarray::Ix1>().expect("bias vector");
        let out = &self.mat(x) + &b;
        let ng = self.ng(x) || self.ng(bias);
        self.push(Op::AddBias(x, bias), Value::Dense(out.into_dyn()), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.value(a) + &self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), Value::Dense(out), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let out = self.value(a).mapv(|v| v * c);
        let ng = self.ng(a);
        self.push(Op::Scale(a, c), Value::Dense(out), ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.mat(x);
        let g = self.value(gain).into_dimensionality::<ndarray::Ix1>().expect("gain");
        let b = self.value(bias).into_dimensionality::<ndarray::Ix1>().expect("bias");
        let d = T::from_usize(xv.ncols()).expect("width");
        let eps = T::c(LN_EPS);
        let mut xhat = Array2::zeros(xv.raw_dim());
        let mut rstd = Array1::zeros(xv.nrows());
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (c, &v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * rs;
            }
        }
        let out = &xhat * &g + &b;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            Value::Dense(out.into_dyn()),
            ng,
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (c, k, half) = (T::c(GELU_C), T::c(GELU_K), T::c(0.5));
        let out = self
            .value(x)
            .mapv(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()));
        let ng = self.ng(x);
        self.push(Op::Gelu(x), Value::Dense(out), ng)
    }

    /// Causal softmax of `q k^T / sqrt(head_dim)` per head and sequence.
    pub fn attn_probs(&mut self, q: NodeId, k: NodeId, heads: usize, seqs: &[SeqSpan]) -> NodeId {
        let (qv, kv) = (self.mat(q), self.mat(k));
        let dh = qv.ncols() / heads;
        let scale = T::one() / T::from_usize(dh).expect("dim").sqrt();
        let mut blocks = Vec::with_capacity(seqs.len());
        for sp in seqs {
            let n = sp.len;
            let mut block = Array3::zeros((heads, n, n));
            for h in 0..heads {
                let qh = qv.slice(s![sp.offset..sp.offset + n, h * dh..(h + 1) * dh]);
                let kh = kv.slice(s![sp.offset..sp.offset + n, h * dh..(h + 1) * dh]);
                let scores = qh.dot(&kh.t());
                let mut p = block.index_axis_mut(Axis(0), h);
                for i in 0..n {
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        max = max.max(scores[[i, j]] * scale);
                    }
                    let mut sum = T::zero();
                    for j in 0..=i {
                        let e = (scores[[i, j]] * scale - max).exp();
                        p[[i, j]] = e;
                        sum += e;
                    }
                    for j in 0..=i {
                        p[[i, j]] = p[[i, j]] / sum;
                    }
                }
            }
            blocks.push(block);
        }
        let ng = self.ng(q) || self.ng(k);
        self.push(
            Op::AttnProbs { q, k },
            Value::Attn(AttnBlocks {
                heads,
                seqs: seqs.to_vec(),
                blocks,
            }),
            ng,
        )
    }

    /// Weighted sum of value rows under `probs`, heads concatenated.
    pub fn attn_apply(&mut self, probs: NodeId, v: NodeId) -> NodeId {
        let vv = self.mat(v);
        let a = self.attn(probs);
        let dh = vv.ncols() / a.heads;
        let mut out = Array2::zeros(vv.raw_dim());
        for (sp, block) in a.seqs.iter().zip(&a.blocks) {
            for h in 0..a.heads {
                let vh = vv.slice(s![sp.offset..sp.offset + sp.len, h * dh..(h + 1) * dh]);
                let r = block.index_axis(Axis(0), h).dot(&vh);
                out.slice_mut(s![sp.offset..sp.offset + sp.len, h * dh..(h + 1) * dh])
                    .assign(&r);
            }
        }
        let ng = self.ng(probs) || self.ng(v);
        self.push(Op::AttnApply { probs, v }, Value::Dense(out.into_dyn()), ng)
    }

    /// Mean over `targets` of the cross-entropy between the softmax of the
    /// logits row and the smoothed one-hot target (smoothing `eps` spread
    /// over the other `V - 1` classes).
    pub fn smooth_ce(&mut self, logits: NodeId, targets: &[(usize, usize)], eps: T) -> Result<NodeId> {
        if targets.is_empty() {
            return Err(Error::Definition("cross-entropy over zero targets".into()));
        }
        let lv = self.mat(logits);
        let k = lv.ncols();
        if k < 2 {
            return Err(Error::Definition("cross-entropy needs at least 2 classes".into()));
        }
        let off = eps / T::from_usize(k - 1).expect("classes");
        let on = T::one() - eps;
        let mut softmax = Array2::zeros((targets.len(), k));
        let mut total = T::zero();
        for (t, &(row, target)) in targets.iter().enumerate() {
            let r = lv.row(row);
            let max = r.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let sum: T = r.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            let mut loss = T::zero();
            for (c, &v) in r.iter().enumerate() {
                let logp = v - lse;
                softmax[[t, c]] = logp.exp();
                let y = if c == target { on } else { off };
                if y != T::zero() {
                    loss -= y * logp;
                }
            }
            total += loss;
        }
        let value = total / T::from_usize(targets.len()).expect("count");
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite cross-entropy".into()));
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Op::SmoothCe {
                logits,
                targets: targets.to_vec(),
                eps,
                softmax,
            },
            Value::Dense(ArrayD::from_elem(IxDyn(&[]), value)),
            ng,
        ))
    }

    /// Share of `head`'s attention mass, over query `rows` of sequence `seq`,
    /// that lands on keys flagged in `keys`. Rows and keys are local to the
    /// sequence (0-based).
    pub fn attn_fraction(&mut self, probs: NodeId, seq: usize, head: usize, rows: &[usize], keys: &[bool]) -> Result<NodeId> {
        let a = self.attn(probs);
        let block = a
            .blocks
            .get(seq)
            .ok_or_else(|| Error::Definition(format!("no sequence {seq} in batch")))?;
        let n = block.shape()[1];
        if head >= a.heads || keys.len() != n || rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::Definition("attention fraction indices out of range".into()));
        }
        let p = block.index_axis(Axis(0), head);
        let (mut num, mut den) = (T::zero(), T::zero());
        for &r in rows {
            for (kk, &v) in p.row(r).iter().enumerate() {
                den += v;
                if keys[kk] {
                    num += v;
                }
            }
        }
        if den <= T::zero() {
            return Err(Error::Numeric("attention rows carry no mass".into()));
        }
        let ng = self.ng(probs);
        Ok(self.push(
            Op::AttnFraction {
                probs,
                seq,
                head,
                rows: rows.to_vec(),
                keys: keys.to_vec(),
                num,
                den,
            },
            Value::Dense(ArrayD::from_elem(IxDyn(&[]), num / den)),
            ng,
        ))
    }

    pub fn mean(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Definition("mean of zero scalars".into()));
        }
        let sum: T = xs.iter().map(|&x| self.scalar(x)).sum();
        let value = sum / T::from_usize(xs.len()).expect("count");
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Op::Mean(xs.to_vec()), Value::Dense(ArrayD::from_elem(IxDyn(&[]), value)), ng))
    }

    /// `a * x + b` on a scalar node.
    pub fn affine(&mut self, x: NodeId, a: T, b: T) -> NodeId {
        let value = a * self.scalar(x) + b;
        let ng = self.ng(x);
        self.push(Op::Affine { x, a }, Value::Dense(ArrayD::from_elem(IxDyn(&[]), value)), ng)
    }

    /// Gradients of the scalar node `loss` with respect to every trainable
    /// parameter used on this tape.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward from a node that was never recorded".into()));
        }
        if !matches!(&self.nodes[loss.0].value, Value::Dense(a) if a.len() == 1) {
            return Err(Error::State("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Grad<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Grad::Dense(ArrayD::from_elem(IxDyn(&[]), T::one())));
        let mut out: Vec<Option<ArrayD<T>>> = vec![None; self.params.len()];

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match (&node.op, g) {
                (Op::Leaf, Grad::Dense(g)) => {
                    if let Value::Param(p) = node.value {
                        accumulate_dense(&mut out[p], g);
                    }
                }
                (Op::Gather { table, ids }, Grad::Dense(g)) => {
                    if self.ng(*table) {
                        let g = g.into_dimensionality::<Ix2>().expect("rank 2");
                        let shape = self.value(*table).raw_dim();
                        let mut gt = ArrayD::<T>::zeros(shape).into_dimensionality::<Ix2>().expect("rank 2");
                        for (r, &i) in ids.iter().enumerate() {
                            let mut row = gt.row_mut(i);
                            row += &g.row(r);
                        }
                        self.send(&mut grads, *table, gt.into_dyn());
                    }
                }
                (Op::MatMul(a, b), Grad::Dense(g)) => {
                    let g = g.into_dimensionality::<Ix2>().expect("rank 2");
                    if self.ng(*a) {
                        let ga = g.dot(&self.mat(*b).t());
                        self.send(&mut grads, *a, ga.into_dyn());
                    }
                    if self.ng(*b) {
                        let gb = self.mat(*a).t().dot(&g);
                        self.send(&mut grads, *b, gb.into_dyn());
                    }
                }
                (Op::AddBias(x, b), Grad::Dense(g)) => {
                    if self.ng(*b) {
                        let g2 = g.view().into_dimensionality::<Ix2>().expect("rank 2");
                        self.send(&mut grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                    }
                    if self.ng(*x) {
                        self.send(&mut grads, *x, g);
                    }
                }
                (Op::Add(a, b), Grad::Dense(g)) => {
                    if self.ng(*a) && self.ng(*b) {
                        self.send(&mut grads, *a, g.clone());
                        self.send(&mut grads, *b, g);
                    } else if self.ng(*a) {
                        self.send(&mut grads, *a, g);
                    } else if self.ng(*b) {
                        self.send(&mut grads, *b, g);
                    }
                }
                (Op::Scale(a, c), Grad::Dense(g)) => {
                    let c = *c;
                    self.send(&mut grads, *a, g.mapv(|v| v * c));
                }
                (Op::LayerNorm { x, gain, bias, xhat, rstd }, Grad::Dense(g)) => {
                    let g = g.into_dimensionality::<Ix2>().expect("rank 2");
                    if self.ng(*gain) {
                        let gg = (&g * xhat).sum_axis(Axis(0));
                        self.send(&mut grads, *gain, gg.into_dyn());
                    }
                    if self.ng(*bias) {
                        self.send(&mut grads, *bias, g.sum_axis(Axis(0)).into_dyn());
                    }
                    if self.ng(*x) {
                        let gv = self.value(*gain).into_dimensionality::<ndarray::Ix1>().expect("gain");
                        let dxhat = &g * &gv;
                        let d = T::from_usize(g.ncols()).expect("width");
                        let mut gx = Array2::zeros(g.raw_dim());
                        for r in 0..g.nrows() {
                            let dr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let m1 = dr.sum() / d;
                            let m2 = dr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
                            for c in 0..g.ncols() {
                                gx[[r, c]] = rstd[r] * (dr[c] - m1 - xr[c] * m2);
                            }
                        }
                        self.send(&mut grads, *x, gx.into_dyn());
                    }
                }
                (Op::Gelu(x), Grad::Dense(g)) => {
                    let (c, k, half) = (T::c(GELU_C), T::c(GELU_K), T::c(0.5));
                    let three = T::c(3.0);
                    let mut gx = g;
                    Zip::from(&mut gx).and(&self.value(*x)).for_each(|gv, &v| {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let d = half * (T::one() + t)
                            + half * v * (T::one() - t * t) * c * (T::one() + three * k * v * v);
                        *gv = *gv * d;
                    });
                    self.send(&mut grads, *x, gx);
                }
                (Op::AttnApply { probs, v }, Grad::Dense(g)) => {
                    let g = g.into_dimensionality::<Ix2>().expect("rank 2");
                    let a = self.attn(*probs);
                    let vv = self.mat(*v);
                    let dh = vv.ncols() / a.heads;
                    if self.ng(*v) {
                        let mut gv = Array2::zeros(vv.raw_dim());
                        for (sp, block) in a.seqs.iter().zip(&a.blocks) {
                            for h in 0..a.heads {
                                let gh = g.slice(s![sp.offset..sp.offset + sp.len, h * dh..(h + 1) * dh]);
                                let r = block.index_axis(Axis(0), h).t().dot(&gh);
                                gv.slice_mut(s![sp.offset..sp.offset + sp.len, h * dh..(h + 1) * dh])
                                    .assign(&r);
                            }
                        }
                        self.send(&mut grads, *v, gv.into_dyn());
                    }
                    if self.ng(*probs) {
                        let mut gp = a.zeros_like();
                        for (bi, sp) in a.seqs.iter().enumerate() {
                            for h in 0..a.heads {
                                let gh = g.slice(s![sp.offset..sp.offset + sp.len, h * dh..(h + 1) * dh]);
                                let vh = vv.slice(s![sp.offset..sp.offset + sp.len, h * dh..(h + 1) * dh]);
                                gp.blocks[bi].index_axis_mut(Axis(0), h).assign(&gh.dot(&vh.t()));
                            }
                        }
                        self.send_attn(&mut grads, *probs, gp);
                    }
                }
                (Op::AttnProbs { q, k }, Grad::Attn(gp)) => {
                    let a = self.attn(NodeId(idx));
                    let (qv, kv) = (self.mat(*q), self.mat(*k));
                    let dh = qv.ncols() / a.heads;
                    let scale = T::one() / T::from_usize(dh).expect("dim").sqrt();
                    let mut gq = Array2::zeros(qv.raw_dim());
                    let mut gk = Array2::zeros(kv.raw_dim());
                    for (bi, sp) in a.seqs.iter().enumerate() {
                        let n = sp.len;
                        for h in 0..a.heads {
                            let p = a.blocks[bi].index_axis(Axis(0), h);
                            let dp = gp.blocks[bi].index_axis(Axis(0), h);
                            let mut ds = Array2::<T>::zeros((n, n));
                            for i in 0..n {
                                let mut dot = T::zero();
                                for j in 0..=i {
                                    dot += dp[[i, j]] * p[[i, j]];
                                }
                                for j in 0..=i {
                                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                                }
                            }
                            let rows = sp.offset..sp.offset + n;
                            let cols = h * dh..(h + 1) * dh;
                            if self.ng(*q) {
                                let kh = kv.slice(s![rows.clone(), cols.clone()]);
                                gq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                            }
                            if self.ng(*k) {
                                let qh = qv.slice(s![rows.clone(), cols.clone()]);
                                gk.slice_mut(s![rows, cols]).assign(&ds.t().dot(&qh));
                            }
                        }
                    }
                    if self.ng(*q) {
                        self.send(&mut grads, *q, gq.into_dyn());
                    }
                    if self.ng(*k) {
                        self.send(&mut grads, *k, gk.into_dyn());
                    }
                }
                (Op::SmoothCe { logits, targets, eps, softmax }, Grad::Dense(g)) => {
                    let g = *g.iter().next().expect("scalar");
                    let lv = self.mat(*logits);
                    let k = lv.ncols();
                    let off = *eps / T::from_usize(k - 1).expect("classes");
                    let on = T::one() - *eps;
                    let w = g / T::from_usize(targets.len()).expect("count");
                    let mut gl = Array2::zeros(lv.raw_dim());
                    for (t, &(row, target)) in targets.iter().enumerate() {
                        for c in 0..k {
                            let y = if c == target { on } else { off };
                            gl[[row, c]] += w * (softmax[[t, c]] - y);
                        }
                    }
                    self.send(&mut grads, *logits, gl.into_dyn());
                }
                (Op::AttnFraction { probs, seq, head, rows, keys, num, den }, Grad::Dense(g)) => {
                    let g = *g.iter().next().expect("scalar");
                    let a = self.attn(*probs);
                    let mut gp = a.zeros_like();
                    let inside = g * (*den - *num) / (*den * *den);
                    let outside = -g * *num / (*den * *den);
                    let mut block = gp.blocks[*seq].index_axis_mut(Axis(0), *head);
                    for &r in rows {
                        for (kk, &flag) in keys.iter().enumerate() {
                            block[[r, kk]] += if flag { inside } else { outside };
                        }
                    }
                    self.send_attn(&mut grads, *probs, gp);
                }
                (Op::Mean(xs), Grad::Dense(g)) => {
                    let g = *g.iter().next().expect("scalar");
                    let share = g / T::from_usize(xs.len()).expect("count");
                    for &x in xs {
                        if self.ng(x) {
                            let shape = self.value(x).raw_dim();
                            self.send(&mut grads, x, ArrayD::from_elem(shape, share));
                        }
                    }
                }
                (Op::Affine { x, a }, Grad::Dense(g)) => {
                    let g = *g.iter().next().expect("scalar") * *a;
                    let shape = self.value(*x).raw_dim();
                    self.send(&mut grads, *x, ArrayD::from_elem(shape, g));
                }
                _ => return Err(Error::State("gradient kind does not match operation".into())),
            }
        }
        Ok(Gradients { grads: out })
    }

    fn send(&self, grads: &mut [Option<Grad<T>>], to: NodeId, g: ArrayD<T>) {
        if !self.ng(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(Grad::Dense(acc)) => *acc += &g,
            slot @ None => *slot = Some(Grad::Dense(g)),
            Some(Grad::Attn(_)) => unreachable!("dense gradient sent to attention node"),
        }
    }

    fn send_attn(&self, grads: &mut [Option<Grad<T>>], to: NodeId, g: AttnBlocks<T>) {
        if !self.ng(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(Grad::Attn(acc)) => {
                for (a, b) in acc.blocks.iter_mut().zip(g.blocks) {
                    *a += &b;
                }
            }
            slot @ None => *slot = Some(Grad::Attn(g)),
            Some(Grad::Dense(_)) => unreachable!("attention gradient sent to dense node"),
        }
    }
}

fn accumulate_dense<T: Scalar>(slot: &mut Option<ArrayD<T>>, g: ArrayD<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is ~0 are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compare [`Tape::backward`] with central differences on up to
/// `coords_per_tensor` seeded coordinates of every trainable tensor.
pub fn grad_check<F>(params: &mut ParamSet<f64>, loss: F, h: f64, coords_per_tensor: usize, seed: u64) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Tape<'p, f64>) -> Result<NodeId>,
{
    grad_check_with(params, &loss, h, coords_per_tensor, seed, |_, _| {})
}

/// As [`grad_check`], with a hook that may alter the analytic gradients
/// before comparison.
pub fn grad_check_with<F>(
    params: &mut ParamSet<f64>,
    loss: &F,
    h: f64,
    coords_per_tensor: usize,
    seed: u64,
    tamper: impl Fn(&str, &mut ArrayD<f64>),
) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Tape<'p, f64>) -> Result<NodeId>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let l = loss(&mut tape)?;
        if !tape.scalar(l).is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        tape.backward(l)?
    };
    let eval = |params: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new(params);
        let l = loss(&mut tape)?;
        let v = tape.scalar(l);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric("non-finite loss under perturbation".into()))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for pid in 0..params.len() {
        if !params.entry(pid).trainable {
            continue;
        }
        let name = params.entry(pid).name.clone();
        let numel = params.entry(pid).value.len();
        let mut g = analytic
            .get(pid)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(params.entry(pid).value.raw_dim()));
        tamper(&name, &mut g);
        let g = g.as_standard_layout().into_owned();
        let gflat = g.as_slice().expect("standard layout");
        let coords = sample(&mut rng, numel, coords_per_tensor.min(numel)).into_vec();
        for c in coords {
            let orig = params.entry(pid).value.as_slice().expect("contiguous")[c];
            params.value_mut(pid).as_slice_mut().expect("contiguous")[c] = orig + h;
            let plus = eval(params);
            params.value_mut(pid).as_slice_mut().expect("contiguous")[c] = orig - h;
            let minus = eval(params);
            params.value_mut(pid).as_slice_mut().expect("contiguous")[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = gflat[c];
            if !a.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
            }
        }
    }
    Ok(report)
}
