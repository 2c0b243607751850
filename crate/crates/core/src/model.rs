//! Decoder-only transformer with learned absolute positions, pre-norm
//! blocks, optional low-rank adapters on the query/value projections,
//! per-head attention capture and greedy generation.

use std::fs;
use std::path::Path;

use log::debug;
use ndarray::{s, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::{DType, NodeId, ParamSet, Scalar, SeqSpan, Tape};
use crate::error::{Error, Result};
use crate::tokenizer::EOT;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EASCKPT1";
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dtype: DType,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size,
            max_seq_len: 256,
            dtype: DType::F32,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 2 || self.max_seq_len == 0 {
            return Err(Error::Config("vocab_size must be >= 2 and max_seq_len >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    fn short(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Value => "v",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: vec![Projection::Query, Projection::Value],
            enabled: true,
            seed: 0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("lora alpha must be > 0".into()));
        }
        let mut t = self.targets.clone();
        t.sort();
        t.dedup();
        if t.is_empty() || t.len() != self.targets.len() {
            return Err(Error::Config("lora targets must be a non-empty set".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Prompt,
    Generated,
}

/// Attention probabilities `[layer, head, row, key]`; rows shorter than the
/// key axis are zero-padded on the right.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub data: Array4<f64>,
    pub row_kinds: Vec<RowKind>,
}

impl AttentionCapture {
    pub fn n_layers(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_heads(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn n_rows(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn n_keys(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn head(&self, layer: usize, head: usize) -> ndarray::ArrayView2<'_, f64> {
        self.data.slice(s![layer, head, .., ..])
    }

    pub fn generated_rows(&self) -> Vec<usize> {
        self.row_kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == RowKind::Generated)
            .map(|(i, _)| i)
            .collect()
    }

    /// Keep only `rows`, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(2), rows),
            row_kinds: rows.iter().map(|&r| self.row_kinds[r]).collect(),
        }
    }
}

/// Anything that maps a token sequence to next-token logits, optionally
/// exposing its attention.
pub trait LanguageModel {
    fn max_seq_len(&self) -> usize;

    fn logits(&self, ids: &[u32], capture: bool) -> Result<(Array2<f64>, Option<AttentionCapture>)>;
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub ids: Vec<u32>,
    pub capture: Option<AttentionCapture>,
}

fn argmax_lowest(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding. Capture row `t` is the query that emitted token `t`.
pub fn generate<M: LanguageModel + ?Sized>(model: &M, prompt: &[u32], max_new: usize, capture: bool) -> Result<Generation> {
    if max_new == 0 {
        return Err(Error::Config("max_new must be >= 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Encoding("empty prompt".into()));
    }
    let need = prompt.len() + max_new - 1;
    if need > model.max_seq_len() {
        return Err(Error::Length {
            len: need,
            max: model.max_seq_len(),
        });
    }
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    let mut rows: Vec<Array2<f64>> = Vec::new();
    let mut shape = (0, 0);
    for _ in 0..max_new {
        let (logits, cap) = model.logits(&seq, capture)?;
        let last = logits.nrows() - 1;
        let next = argmax_lowest(logits.row(last)) as u32;
        if let Some(cap) = cap {
            shape = (cap.n_layers(), cap.n_heads());
            let r = cap.data.slice(s![.., .., last, ..]);
            rows.push(r.to_owned().into_shape_with_order((shape.0 * shape.1, seq.len())).expect("standard layout"));
        }
        out.push(next);
        if next == EOT {
            break;
        }
        seq.push(next);
    }
    let capture = capture.then(|| {
        let n_keys = rows.last().map_or(0, |r| r.ncols());
        let mut data = Array4::zeros((shape.0, shape.1, rows.len(), n_keys));
        for (t, r) in rows.iter().enumerate() {
            for l in 0..shape.0 {
                for h in 0..shape.1 {
                    data.slice_mut(s![l, h, t, ..r.ncols()]).assign(&r.row(l * shape.1 + h));
                }
            }
        }
        AttentionCapture {
            data,
            row_kinds: vec![RowKind::Generated; rows.len()],
        }
    });
    Ok(Generation { ids: out, capture })
}

/// Node handles of one packed forward pass.
#[derive(Debug, Clone)]
pub struct ForwardGraph {
    pub logits: NodeId,
    pub attn: Vec<NodeId>,
    pub seqs: Vec<SeqSpan>,
}

#[derive(Debug, Clone)]
pub struct Transformer<T: Scalar> {
    pub config: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub params: ParamSet<T>,
    pub vocab_hash: String,
    pub step: u64,
}

fn normal_array<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let d = Normal::new(0.0, INIT_STD).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::c(d.sample(rng)))
}

fn lora_name(layer: usize, p: Projection, which: &str) -> String {
    format!("layers.{layer}.attn.{}.lora_{which}", p.short())
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig, vocab_hash: impl Into<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "config dtype {:?} does not match model scalar {:?}",
                config.dtype,
                T::DTYPE
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut p = ParamSet::new();
        let ones = |n: usize| ArrayD::from_elem(IxDyn(&[n]), T::one());
        let zeros = |n: usize| ArrayD::zeros(IxDyn(&[n]));
        p.insert("tok_emb", normal_array(&[v, d], &mut rng), true)?;
        p.insert("pos_emb", normal_array(&[config.max_seq_len, d], &mut rng), true)?;
        for l in 0..config.n_layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            p.insert(n("ln1.g"), ones(d), true)?;
            p.insert(n("ln1.b"), zeros(d), true)?;
            for w in ["q", "k", "v", "o"] {
                p.insert(n(&format!("attn.w{w}")), normal_array(&[d, d], &mut rng), true)?;
                p.insert(n(&format!("attn.b{w}")), zeros(d), true)?;
            }
            p.insert(n("ln2.g"), ones(d), true)?;
            p.insert(n("ln2.b"), zeros(d), true)?;
            p.insert(n("mlp.w1"), normal_array(&[d, f], &mut rng), true)?;
            p.insert(n("mlp.b1"), zeros(f), true)?;
            p.insert(n("mlp.w2"), normal_array(&[f, d], &mut rng), true)?;
            p.insert(n("mlp.b2"), zeros(d), true)?;
        }
        p.insert("ln_f.g", ones(d), true)?;
        p.insert("ln_f.b", zeros(d), true)?;
        p.insert("lm_head.w", normal_array(&[d, v], &mut rng), true)?;
        p.insert("lm_head.b", zeros(v), true)?;
        Ok(Self {
            config,
            lora: None,
            params: p,
            vocab_hash: vocab_hash.into(),
            step: 0,
        })
    }

    pub fn attach_lora(&mut self, cfg: &LoraConfig) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::State("adapters already attached".into()));
        }
        cfg.validate()?;
        self.params.set_trainable(|_| true, false);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = self.config.d_model;
        for l in 0..self.config.n_layers {
            for &t in &cfg.targets {
                self.params.insert(lora_name(l, t, "a"), normal_array(&[d, cfg.rank], &mut rng), true)?;
                self.params
                    .insert(lora_name(l, t, "b"), ArrayD::zeros(IxDyn(&[cfg.rank, d])), true)?;
            }
        }
        self.lora = Some(cfg.clone());
        Ok(())
    }

    pub fn detach_lora(&mut self) -> Result<()> {
        if self.lora.take().is_none() {
            return Err(Error::State("no adapters attached".into()));
        }
        self.params.remove_where(|n| n.contains(".lora_"));
        self.params.set_trainable(|_| true, true);
        Ok(())
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn tape(&self) -> Tape<'_, T> {
        Tape::new(&self.params)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Encoding("empty sequence".into()));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Encoding(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    fn projection(&self, tape: &mut Tape<'_, T>, h: NodeId, layer: usize, w: &str, p: Option<Projection>) -> Result<NodeId> {
        let wn = tape.param(&format!("layers.{layer}.attn.w{w}"))?;
        let bn = tape.param(&format!("layers.{layer}.attn.b{w}"))?;
        let y = tape.matmul(h, wn);
        let y = tape.add_bias(y, bn);
        match (&self.lora, p) {
            (Some(cfg), Some(p)) if cfg.enabled && cfg.targets.contains(&p) => {
                let a = tape.param(&lora_name(layer, p, "a"))?;
                let b = tape.param(&lora_name(layer, p, "b"))?;
                let ha = tape.matmul(h, a);
                let hab = tape.matmul(ha, b);
                let delta = tape.scale(hab, T::c(cfg.scale()));
                Ok(tape.add(y, delta))
            }
            _ => Ok(y),
        }
    }

    /// Record a forward pass over `batch`, packed row-wise.
    pub fn build(&self, tape: &mut Tape<'_, T>, batch: &[&[u32]]) -> Result<ForwardGraph> {
        let mut seqs = Vec::with_capacity(batch.len());
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in batch {
            self.check_ids(s)?;
            seqs.push(SeqSpan {
                offset: ids.len(),
                len: s.len(),
            });
            ids.extend(s.iter().map(|&i| i as usize));
            pos.extend(0..s.len());
        }
        let tok = tape.param("tok_emb")?;
        let pe = tape.param("pos_emb")?;
        let te = tape.gather(tok, &ids)?;
        let pe = tape.gather(pe, &pos)?;
        let mut x = tape.add(te, pe);
        let mut attn = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let g = tape.param(&format!("layers.{l}.ln1.g"))?;
            let b = tape.param(&format!("layers.{l}.ln1.b"))?;
            let h = tape.layer_norm(x, g, b);
            let q = self.projection(tape, h, l, "q", Some(Projection::Query))?;
            let k = self.projection(tape, h, l, "k", None)?;
            let v = self.projection(tape, h, l, "v", Some(Projection::Value))?;
            let p = tape.attn_probs(q, k, self.config.n_heads, &seqs);
            attn.push(p);
            let a = tape.attn_apply(p, v);
            let o = self.projection(tape, a, l, "o", None)?;
            x = tape.add(x, o);
            let g = tape.param(&format!("layers.{l}.ln2.g"))?;
            let b = tape.param(&format!("layers.{l}.ln2.b"))?;
            let h = tape.layer_norm(x, g, b);
            let w1 = tape.param(&format!("layers.{l}.mlp.w1"))?;
            let b1 = tape.param(&format!("layers.{l}.mlp.b1"))?;
            let w2 = tape.param(&format!("layers.{l}.mlp.w2"))?;
            let b2 = tape.param(&format!("layers.{l}.mlp.b2"))?;
            let f = tape.matmul(h, w1);
            let f = tape.add_bias(f, b1);
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2);
            let f = tape.add_bias(f, b2);
            x = tape.add(x, f);
        }
        let g = tape.param("ln_f.g")?;
        let b = tape.param("ln_f.b")?;
        let h = tape.layer_norm(x, g, b);
        let w = tape.param("lm_head.w")?;
        let bo = tape.param("lm_head.b")?;
        let logits = tape.matmul(h, w);
        let logits = tape.add_bias(logits, bo);
        Ok(ForwardGraph { logits, attn, seqs })
    }

    /// Capture of sequence `seq` in a recorded graph, every row tagged prompt.
    pub fn capture_of(&self, tape: &Tape<'_, T>, graph: &ForwardGraph, seq: usize) -> AttentionCapture {
        let n = graph.seqs[seq].len;
        let (l, h) = (self.config.n_layers, self.config.n_heads);
        let mut data = Array4::zeros((l, h, n, n));
        for (li, &node) in graph.attn.iter().enumerate() {
            let block = &tape.attn(node).blocks[seq];
            data.slice_mut(s![li, .., .., ..]).assign(&block.mapv(|v| v.f64()));
        }
        AttentionCapture {
            data,
            row_kinds: vec![RowKind::Prompt; n],
        }
    }

    pub fn forward(&self, ids: &[u32], capture: bool) -> Result<(Array2<T>, Option<AttentionCapture>)> {
        let mut tape = self.tape();
        let g = self.build(&mut tape, &[ids])?;
        let logits = tape
            .value(g.logits)
            .into_dimensionality::<ndarray::Ix2>()
            .expect("rank 2")
            .to_owned();
        let cap = capture.then(|| self.capture_of(&tape, &g, 0));
        Ok((logits, cap))
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut blob = Vec::new();
        for e in self.params.entries() {
            tensors.push(TensorHeader {
                name: e.name.clone(),
                dtype: T::DTYPE,
                shape: e.value.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for &v in e.value.as_standard_layout().iter() {
                v.write_le(&mut blob);
            }
        }
        let header = CheckpointHeader {
            config: self.config.clone(),
            lora: self.lora.clone(),
            vocab_hash: self.vocab_hash.clone(),
            step: self.step,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.checkpoint_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Rebuild a model from checkpoint bytes. When `vocab_hash` is given it
    /// must match the stored hash.
    pub fn from_checkpoint_bytes(bytes: &[u8], vocab_hash: Option<&str>) -> Result<Self> {
        let (header, blob) = split_checkpoint(bytes)?;
        if let Some(found) = vocab_hash {
            if found != header.vocab_hash {
                return Err(Error::VocabHash {
                    expected: header.vocab_hash,
                    found: found.to_string(),
                });
            }
        }
        let mut model = Self::new(header.config.clone(), header.vocab_hash.clone(), 0)
            .map_err(|e| Error::load("header", e.to_string()))?;
        if let Some(l) = &header.lora {
            model.attach_lora(l).map_err(|e| Error::load("header", e.to_string()))?;
        }
        for e in model.params.entries() {
            if !header.tensors.iter().any(|t| t.name == e.name) {
                return Err(Error::load(&e.name, "missing from checkpoint"));
            }
        }
        for t in &header.tensors {
            let id = model
                .params
                .id(&t.name)
                .ok_or_else(|| Error::load(&t.name, "unexpected tensor"))?;
            if t.dtype != T::DTYPE {
                return Err(Error::load(&t.name, format!("dtype {:?}, expected {:?}", t.dtype, T::DTYPE)));
            }
            let value = model.params.value_mut(id);
            if value.shape() != t.shape.as_slice() {
                return Err(Error::load(
                    &t.name,
                    format!("shape {:?}, expected {:?}", t.shape, value.shape()),
                ));
            }
            let size = T::DTYPE.size();
            let start = t.offset as usize;
            let end = start + value.len() * size;
            let data = blob
                .get(start..end)
                .ok_or_else(|| Error::load(&t.name, "data truncated"))?;
            for (v, chunk) in value.iter_mut().zip(data.chunks_exact(size)) {
                *v = T::read_le(chunk);
            }
        }
        model.step = header.step;
        debug!("loaded checkpoint at step {}", model.step);
        Ok(model)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>, vocab_hash: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, vocab_hash)
    }
}

impl<T: Scalar> LanguageModel for Transformer<T> {
    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn logits(&self, ids: &[u32], capture: bool) -> Result<(Array2<f64>, Option<AttentionCapture>)> {
        let (l, c) = self.forward(ids, capture)?;
        Ok((l.mapv(|v| v.f64()), c))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub vocab_hash: String,
    pub step: u64,
    pub tensors: Vec<TensorHeader>,
}

fn split_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::load("header", "bad magic"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::load("header", "header truncated"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::load("header", e.to_string()))?;
    Ok((header, &bytes[12 + len..]))
}

/// Header of a checkpoint file without loading its tensors.
pub fn peek_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_checkpoint(&bytes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dtype: DType) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 16,
            dtype,
        }
    }

    #[test]
    fn rows_are_stochastic_and_causal() {
        let m = Transformer::<f32>::new(tiny(DType::F32), "h", 1).unwrap();
        let (logits, cap) = m.forward(&[3, 4, 5, 6, 7], true).unwrap();
        assert_eq!(logits.dim(), (5, 12));
        let cap = cap.unwrap();
        for l in 0..2 {
            for h in 0..2 {
                let a = cap.head(l, h);
                assert_eq!(a[[0, 0]], 1.0);
                for q in 0..5 {
                    assert!((a.row(q).sum() - 1.0).abs() < 1e-5);
                    assert!(a.row(q).iter().skip(q + 1).all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn overlong_input_is_length_error() {
        let m = Transformer::<f32>::new(tiny(DType::F32), "h", 1).unwrap();
        assert!(matches!(m.forward(&[3; 17], false), Err(Error::Length { len: 17, max: 16 })));
    }

    #[test]
    fn dtype_must_match() {
        assert!(Transformer::<f64>::new(tiny(DType::F32), "h", 1).is_err());
    }

    #[test]
    fn lora_zero_init_identity_and_count() {
        let mut m = Transformer::<f32>::new(tiny(DType::F32), "h", 1).unwrap();
        let ids = [3, 9, 4, 1];
        let (base, _) = m.forward(&ids, false).unwrap();
        let cfg = LoraConfig {
            rank: 2,
            alpha: 4.0,
            targets: vec![Projection::Query, Projection::Value],
            enabled: true,
            seed: 5,
        };
        m.attach_lora(&cfg).unwrap();
        assert!(matches!(m.attach_lora(&cfg), Err(Error::State(_))));
        let (with, _) = m.forward(&ids, false).unwrap();
        assert_eq!(base, with);
        assert_eq!(m.trainable_param_count(), 2 * 2 * 2 * (8 + 8));
        m.detach_lora().unwrap();
        let (back, _) = m.forward(&ids, false).unwrap();
        assert_eq!(base, back);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut m = Transformer::<f32>::new(tiny(DType::F32), "abc", 2).unwrap();
        m.attach_lora(&LoraConfig::default()).unwrap();
        m.params.get_mut("layers.0.attn.q.lora_b").unwrap().fill(0.25);
        m.step = 7;
        let bytes = m.checkpoint_bytes().unwrap();
        let back = Transformer::<f32>::from_checkpoint_bytes(&bytes, Some("abc")).unwrap();
        assert_eq!(back.step, 7);
        assert_eq!(back.checkpoint_bytes().unwrap(), bytes);
        assert_eq!(m.forward(&[1, 2, 3], false).unwrap().0, back.forward(&[1, 2, 3], false).unwrap().0);
    }

    #[test]
    fn checkpoint_errors() {
        let m = Transformer::<f32>::new(tiny(DType::F32), "abc", 2).unwrap();
        let mut bytes = m.checkpoint_bytes().unwrap();
        assert!(matches!(
            Transformer::<f32>::from_checkpoint_bytes(&bytes, Some("other")),
            Err(Error::VocabHash { .. })
        ));
        assert!(matches!(
            Transformer::<f64>::from_checkpoint_bytes(&bytes, None),
            Err(Error::Load { .. })
        ));
        bytes[0] = b'X';
        match Transformer::<f32>::from_checkpoint_bytes(&bytes, None) {
            Err(Error::Load { tensor, .. }) => assert_eq!(tensor, "header"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupted_shape_names_tensor() {
        let m = Transformer::<f32>::new(tiny(DType::F32), "abc", 2).unwrap();
        let bytes = m.checkpoint_bytes().unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        header.tensors[1].shape = vec![3, 3];
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[12 + len..]);
        match Transformer::<f32>::from_checkpoint_bytes(&out, None) {
            Err(Error::Load { tensor, .. }) => assert_eq!(tensor, "pos_emb"),
            other => panic!("{other:?}"),
        }
    }

    struct Scripted {
        steps: Vec<Vec<f64>>,
    }

    impl LanguageModel for Scripted {
        fn max_seq_len(&self) -> usize {
            64
        }

        fn logits(&self, ids: &[u32], capture: bool) -> Result<(Array2<f64>, Option<AttentionCapture>)> {
            let n = ids.len();
            let step = self.steps[(n - 3).min(self.steps.len() - 1)].clone();
            let v = step.len();
            let mut l = Array2::zeros((n, v));
            l.row_mut(n - 1).assign(&ndarray::Array1::from(step));
            let cap = capture.then(|| {
                let mut data = Array4::zeros((1, 1, n, n));
                for q in 0..n {
                    data[[0, 0, q, q]] = 1.0;
                }
                AttentionCapture {
                    data,
                    row_kinds: vec![RowKind::Prompt; n],
                }
            });
            Ok((l, cap))
        }
    }

    #[test]
    fn greedy_rules() {
        let mut favour5 = vec![0.0; 10];
        favour5[5] = 1.0;
        let m = Scripted { steps: vec![favour5] };
        assert_eq!(generate(&m, &[2, 2, 2], 4, false).unwrap().ids, vec![5; 4]);

        let mut tie = vec![0.0; 10];
        tie[3] = 2.0;
        tie[9] = 2.0;
        let m = Scripted { steps: vec![tie] };
        assert_eq!(generate(&m, &[2, 2, 2], 1, false).unwrap().ids, vec![3]);

        let mut a = vec![0.0; 10];
        a[4] = 1.0;
        let mut b = vec![0.0; 10];
        b[EOT as usize] = 1.0;
        let m = Scripted { steps: vec![a, b] };
        let g = generate(&m, &[2, 2, 2], 6, true).unwrap();
        assert_eq!(g.ids, vec![4, EOT]);
        let cap = g.capture.unwrap();
        assert_eq!(cap.n_rows(), 2);
        assert_eq!(cap.n_keys(), 4);
        assert_eq!(cap.data[[0, 0, 0, 2]], 1.0);
        assert_eq!(cap.data[[0, 0, 0, 3]], 0.0);
        assert_eq!(cap.data[[0, 0, 1, 3]], 1.0);
        assert!(matches!(generate(&m, &[2; 60], 6, false), Err(Error::Length { .. })));
    }

    /// Independent straight-line forward of a one-layer model.
    fn reference_forward(m: &Transformer<f64>, ids: &[usize]) -> Vec<Vec<f64>> {
        let p = |n: &str| m.params.get(n).unwrap().clone();
        let d = m.config.d_model;
        let heads = m.config.n_heads;
        let dh = d / heads;
        let n = ids.len();
        let mat = |a: &ArrayD<f64>, r: usize, c: usize| a[[r, c]];
        let vecv = |a: &ArrayD<f64>, c: usize| a[[c]];
        let ln = |x: &[f64], g: &ArrayD<f64>, b: &ArrayD<f64>| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            (0..d).map(|c| (x[c] - mean) / (var + 1e-5).sqrt() * vecv(g, c) + vecv(b, c)).collect()
        };
        let lin = |x: &[f64], w: &ArrayD<f64>, b: &ArrayD<f64>, out: usize| -> Vec<f64> {
            (0..out)
                .map(|o| vecv(b, o) + (0..x.len()).map(|i| x[i] * mat(w, i, o)).sum::<f64>())
                .collect()
        };
        let (te, pe) = (p("tok_emb"), p("pos_emb"));
        let mut x: Vec<Vec<f64>> = (0..n)
            .map(|t| (0..d).map(|c| mat(&te, ids[t], c) + mat(&pe, t, c)).collect())
            .collect();
        let hs: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &p("layers.0.ln1.g"), &p("layers.0.ln1.b"))).collect();
        let q: Vec<Vec<f64>> = hs.iter().map(|h| lin(h, &p("layers.0.attn.wq"), &p("layers.0.attn.bq"), d)).collect();
        let k: Vec<Vec<f64>> = hs.iter().map(|h| lin(h, &p("layers.0.attn.wk"), &p("layers.0.attn.bk"), d)).collect();
        let v: Vec<Vec<f64>> = hs.iter().map(|h| lin(h, &p("layers.0.attn.wv"), &p("layers.0.attn.bv"), d)).collect();
        let mut att = vec![vec![0.0; d]; n];
        for h in 0..heads {
            for i in 0..n {
                let sc: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = sc.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..=i {
                    let w = (sc[j] - mx).exp() / z;
                    for c in 0..dh {
                        att[i][h * dh + c] += w * v[j][h * dh + c];
                    }
                }
            }
        }
        for i in 0..n {
            let o = lin(&att[i], &p("layers.0.attn.wo"), &p("layers.0.attn.bo"), d);
            for c in 0..d {
                x[i][c] += o[c];
            }
            let h2 = ln(&x[i], &p("layers.0.ln2.g"), &p("layers.0.ln2.b"));
            let f = lin(&h2, &p("layers.0.mlp.w1"), &p("layers.0.mlp.b1"), m.config.d_ff);
            let f: Vec<f64> = f
                .iter()
                .map(|&u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh()))
                .collect();
            let f = lin(&f, &p("layers.0.mlp.w2"), &p("layers.0.mlp.b2"), d);
            for c in 0..d {
                x[i][c] += f[c];
            }
        }
        x.iter()
            .map(|r| {
                let h = ln(r, &p("ln_f.g"), &p("ln_f.b"));
                lin(&h, &p("lm_head.w"), &p("lm_head.b"), m.config.vocab_size)
            })
            .collect()
    }

    #[test]
    fn matches_straight_line_forward() {
        let mut cfg = tiny(DType::F64);
        cfg.n_layers = 1;
        let mut m = Transformer::<f64>::new(cfg, "h", 3).unwrap();
        // Larger weights so attention is far from uniform.
        for name in ["layers.0.attn.wq", "layers.0.attn.wk", "tok_emb"] {
            m.params.get_mut(name).unwrap().mapv_inplace(|v| v * 40.0);
        }
        for ids in [vec![4usize, 7], vec![1, 5, 9, 2, 2]] {
            let ids32: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
            let (got, _) = m.forward(&ids32, false).unwrap();
            let want = reference_forward(&m, &ids);
            for (r, row) in want.iter().enumerate() {
                for (c, &w) in row.iter().enumerate() {
                    assert!((got[[r, c]] - w).abs() < 1e-10, "{r},{c}: {} vs {w}", got[[r, c]]);
                }
            }
        }
    }

    #[test]
    fn packed_batch_matches_single_forward() {
        let m = Transformer::<f64>::new(tiny(DType::F64), "h", 4).unwrap();
        let a = [3u32, 4, 5];
        let b = [6u32, 7, 8, 9, 10];
        let mut tape = m.tape();
        let g = m.build(&mut tape, &[&a, &b]).unwrap();
        let packed = tape.value(g.logits).into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let (lb, _) = m.forward(&b, false).unwrap();
        for r in 0..5 {
            for c in 0..12 {
                assert!((packed[[3 + r, c]] - lb[[r, c]]).abs() < 1e-12);
            }
        }
    }
}
