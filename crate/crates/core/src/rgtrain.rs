//! Reasoning-guided fine-tuning: label-smoothed cross-entropy on the answer
//! tokens plus a cosine-decayed penalty pulling the selected heads'
//! attention onto the annotated stage spans. Also hosts the plain
//! language-model pretraining loop used to produce the base model.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::str::FromStr;

use log::{info, warn};
use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{AdamConfig, NodeId, Scalar};
use crate::error::{Error, Result};
use crate::headid::HeadSelection;
use crate::model::{LoraConfig, Transformer};
use crate::synthcorpus::{AnnotatedRecord, Stage};
use crate::tokenizer::{encode, encode_plain, TokenRange, Vocabulary, DIAGNOSIS_SUFFIX, EOT};

pub fn smooth_labels(k: usize, true_idx: usize, eps: f64) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::Definition(format!("label smoothing needs K >= 2, got {k}")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Definition(format!("smoothing factor {eps} outside [0, 1)")));
    }
    if true_idx >= k {
        return Err(Error::Definition(format!("class {true_idx} outside K = {k}")));
    }
    let off = eps / (k - 1) as f64;
    let mut v = vec![off; k];
    v[true_idx] = 1.0 - eps;
    Ok(v)
}

/// `-Σ ỹ_i log p_i`.
pub fn smooth_ce(log_probs: &[f64], smoothed: &[f64]) -> Result<f64> {
    if log_probs.len() != smoothed.len() {
        return Err(Error::Definition("log-probabilities and targets differ in length".into()));
    }
    if log_probs.iter().chain(smoothed).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite cross-entropy input".into()));
    }
    Ok(-log_probs.iter().zip(smoothed).map(|(lp, y)| y * lp).sum::<f64>())
}

/// Key mask (0-based, length `n`) of the union of `ranges`.
pub fn range_mask(ranges: &[TokenRange], n: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for r in ranges {
        if r.end() > n {
            return Err(Error::Definition(format!(
                "range ({}, {}) exceeds {n} keys",
                r.start(),
                r.end()
            )));
        }
        for m in &mut mask[r.zero_based()] {
            *m = true;
        }
    }
    Ok(mask)
}

/// Share of the attention mass of `a` (rows = queries, columns = keys
/// `1..=n`) that falls on the union of `ranges`.
pub fn attention_fraction(a: ArrayView2<'_, f64>, ranges: &[TokenRange], n: usize) -> Result<f64> {
    if a.nrows() == 0 || n == 0 {
        return Err(Error::Definition("attention fraction of an empty matrix".into()));
    }
    if a.ncols() < n {
        return Err(Error::Definition(format!("matrix has {} keys, expected {n}", a.ncols())));
    }
    let mask = range_mask(ranges, n)?;
    let (mut num, mut den) = (0.0, 0.0);
    for row in a.outer_iter() {
        for (k, &v) in row.iter().take(n).enumerate() {
            den += v;
            if mask[k] {
                num += v;
            }
        }
    }
    if den <= 0.0 {
        return Err(Error::Numeric("attention rows carry no mass".into()));
    }
    Ok(num / den)
}

/// `(λ/2)(1 + cos(eπ/E))`; zero past the end of the schedule.
pub fn rg_weight(lambda: f64, e: usize, total: usize) -> f64 {
    if e > total {
        warn!("step {e} beyond schedule length {total}; penalty weight clamped to 0");
        return 0.0;
    }
    if total == 0 {
        return 0.0;
    }
    lambda / 2.0 * (1.0 + (e as f64 * PI / total as f64).cos())
}

pub fn rg_loss(smooth_loss: f64, fractions: &[f64], lambda: f64, e: usize, total: usize) -> f64 {
    let w = rg_weight(lambda, e, total);
    if w == 0.0 || fractions.is_empty() {
        return smooth_loss;
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    smooth_loss + w * (1.0 - mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoCrs,
    NoEaHead,
    NoRgLoss,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoCrs => "no_crs",
            Ablation::NoEaHead => "no_ea_head",
            Ablation::NoRgLoss => "no_rg_loss",
        }
    }

    /// Whether inputs carry the reasoning markers.
    pub fn annotated(self) -> bool {
        self != Ablation::NoCrs
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_crs" => Ok(Ablation::NoCrs),
            "no_ea_head" => Ok(Ablation::NoEaHead),
            "no_rg_loss" => Ok(Ablation::NoRgLoss),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RGConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub total_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lora: LoraConfig,
    pub heads: Option<HeadSelection>,
    pub ablation: Ablation,
}

impl Default for RGConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            lambda: 1.0,
            total_steps: 200,
            lr: 3e-4,
            batch_size: 8,
            seed: 0,
            lora: LoraConfig::default(),
            heads: None,
            ablation: Ablation::Full,
        }
    }
}

impl RGConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config("epsilon must lie in [0, 1)".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        self.lora.validate()?;
        if self.ablation == Ablation::Full && self.heads.is_none() {
            return Err(Error::Config("full mode needs a head selection".into()));
        }
        Ok(())
    }

    /// λ after the ablation switch.
    pub fn effective_lambda(&self) -> f64 {
        match self.ablation {
            Ablation::Full | Ablation::NoEaHead => self.lambda,
            Ablation::NoCrs | Ablation::NoRgLoss => 0.0,
        }
    }

    /// Heads the penalty (or the log) is computed on.
    pub fn resolved_heads(&self, n_layers: usize, n_heads: usize) -> HeadSelection {
        match self.ablation {
            Ablation::NoEaHead => HeadSelection::layer_partition(n_layers, n_heads),
            _ => self.heads.clone().unwrap_or_default(),
        }
    }
}

/// Record tokens, the diagnosis suffix and the answer (label + end token).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub ids: Vec<u32>,
    /// 0-based index of the first answer token.
    pub answer_start: usize,
    pub stage_ranges: BTreeMap<Stage, Vec<TokenRange>>,
}

impl TrainExample {
    pub fn from_record(record: &AnnotatedRecord, vocab: &Vocabulary, annotated: bool) -> Result<Self> {
        let rec = if annotated {
            encode(record, vocab)?
        } else {
            encode_plain(record, vocab)?
        };
        let mut ids = rec.ids;
        ids.extend(vocab.encode_text(DIAGNOSIS_SUFFIX));
        let answer_start = ids.len();
        ids.extend_from_slice(&rec.label_ids);
        ids.push(EOT);
        Ok(Self {
            ids,
            answer_start,
            stage_ranges: rec.stage_ranges,
        })
    }

    pub fn answer_ids(&self) -> &[u32] {
        &self.ids[self.answer_start..]
    }

    pub fn answer_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i >= self.answer_start).collect()
    }

    /// 0-based rows whose next-token prediction is an answer token.
    pub fn answer_query_rows(&self) -> Vec<usize> {
        (self.answer_start - 1..self.ids.len() - 1).collect()
    }

    /// Key mask (over the whole sequence) for `stage`, if it has ranges.
    pub fn stage_mask(&self, stage: Stage) -> Result<Option<Vec<bool>>> {
        match self.stage_ranges.get(&stage) {
            Some(rs) if !rs.is_empty() => Ok(Some(range_mask(rs, self.ids.len())?)),
            _ => Ok(None),
        }
    }
}

pub fn build_examples(records: &[AnnotatedRecord], vocab: &Vocabulary, annotated: bool) -> Result<Vec<TrainExample>> {
    records
        .iter()
        .map(|r| TrainExample::from_record(r, vocab, annotated))
        .collect()
}

/// Indices of the batch used at `step`: consecutive slices of per-epoch
/// seeded permutations.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut epoch_cache: Option<(usize, Vec<usize>)> = None;
    for pos in step * batch..(step + 1) * batch {
        let epoch = pos / n;
        if epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch as u64);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            epoch_cache = Some((epoch, perm));
        }
        out.push(epoch_cache.as_ref().expect("cached").1[pos % n]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_smooth: f64,
    pub penalty: f64,
    pub weight: f64,
    pub att_per_head: BTreeMap<String, f64>,
}

/// Fine-tune `model` under `cfg`. Adapters are attached when absent; an
/// already adapted model resumes from its stored step.
pub fn train_rg<T: Scalar>(model: &mut Transformer<T>, cfg: &RGConfig, examples: &[TrainExample]) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let heads = cfg.resolved_heads(model.config.n_layers, model.config.n_heads);
    heads.validate(model.config.n_layers, model.config.n_heads)?;
    if model.lora.is_none() {
        model.attach_lora(&cfg.lora)?;
        model.step = 0;
    }
    let lambda = cfg.effective_lambda();
    let adam = AdamConfig::with_lr(cfg.lr);
    let pairs = heads.pairs();
    let mut logs = Vec::new();
    let start = model.step as usize;
    for e in start..cfg.total_steps {
        let batch: Vec<&TrainExample> = batch_indices(examples.len(), cfg.batch_size, cfg.seed, e)
            .into_iter()
            .map(|i| &examples[i])
            .collect();
        let w = rg_weight(lambda, e, cfg.total_steps);
        let (grads, log) = {
            let mut tape = model.tape();
            let ids: Vec<&[u32]> = batch.iter().map(|ex| ex.ids.as_slice()).collect();
            let g = model.build(&mut tape, &ids)?;
            let mut losses = Vec::with_capacity(batch.len());
            let mut ce_sum = 0.0;
            let mut pen_sum = 0.0;
            let mut att: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for (b, ex) in batch.iter().enumerate() {
                let off = g.seqs[b].offset;
                let rows = ex.answer_query_rows();
                let targets: Vec<(usize, usize)> = rows.iter().map(|&r| (off + r, ex.ids[r + 1] as usize)).collect();
                let ce = tape.smooth_ce(g.logits, &targets, T::c(cfg.epsilon))?;
                ce_sum += tape.scalar(ce).f64();
                let mut fracs: Vec<NodeId> = Vec::new();
                for &(stage, h) in &pairs {
                    if let Some(mask) = ex.stage_mask(stage)? {
                        let f = tape.attn_fraction(g.attn[h.layer], b, h.head, &rows, &mask)?;
                        let slot = att.entry(h.label()).or_insert((0.0, 0));
                        slot.0 += tape.scalar(f).f64();
                        slot.1 += 1;
                        fracs.push(f);
                    }
                }
                let loss = if w > 0.0 && !fracs.is_empty() {
                    let m = tape.mean(&fracs)?;
                    let pen = tape.affine(m, T::c(-w), T::c(w));
                    pen_sum += tape.scalar(pen).f64();
                    tape.add(ce, pen)
                } else {
                    ce
                };
                losses.push(loss);
            }
            let total = tape.mean(&losses)?;
            if !tape.scalar(total).is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {e}")));
            }
            let grads = tape.backward(total)?;
            let n = batch.len() as f64;
            let log = StepLog {
                step: e,
                l_smooth: ce_sum / n,
                penalty: pen_sum / n,
                weight: w,
                att_per_head: att.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
            };
            (grads, log)
        };
        model.params.accumulate_grads(grads, T::one())?;
        model.params.adam_step(&adam)?;
        model.step = e as u64 + 1;
        if e % 25 == 0 || e + 1 == cfg.total_steps {
            info!("rg step {e}: l_smooth {:.4} penalty {:.4} weight {:.4}", log.l_smooth, log.penalty, log.weight);
        }
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability that a sampled record is shown with its markers.
    pub annotated_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
            annotated_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub step: usize,
    pub loss: f64,
}

/// Next-token training of every parameter on record + diagnosis sequences.
pub fn pretrain<T: Scalar>(
    model: &mut Transformer<T>,
    records: &[AnnotatedRecord],
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
) -> Result<Vec<PretrainLog>> {
    if model.lora.is_some() {
        return Err(Error::State("pretraining a model with adapters attached".into()));
    }
    if records.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("pretraining needs records and a positive batch size".into()));
    }
    let annotated = build_examples(records, vocab, true)?;
    let plain = build_examples(records, vocab, false)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut logs = Vec::with_capacity(cfg.steps);
    let start = model.step as usize;
    for step in start..cfg.steps {
        let mut pick = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        pick.set_stream(step as u64);
        let batch: Vec<&[u32]> = batch_indices(records.len(), cfg.batch_size, cfg.seed, step)
            .into_iter()
            .map(|i| {
                if pick.gen_bool(cfg.annotated_fraction) {
                    annotated[i].ids.as_slice()
                } else {
                    plain[i].ids.as_slice()
                }
            })
            .collect();
        let (grads, loss) = {
            let mut tape = model.tape();
            let g = model.build(&mut tape, &batch)?;
            let mut targets = Vec::new();
            for (b, ids) in batch.iter().enumerate() {
                let off = g.seqs[b].offset;
                targets.extend((0..ids.len() - 1).map(|r| (off + r, ids[r + 1] as usize)));
            }
            let l = tape.smooth_ce(g.logits, &targets, T::zero())?;
            (tape.backward(l)?, tape.scalar(l).f64())
        };
        model.params.accumulate_grads(grads, T::one())?;
        model.params.adam_step(&adam)?;
        model.step = step as u64 + 1;
        if step % 100 == 0 || step + 1 == cfg.steps {
            info!("pretrain step {step}: loss {loss:.4}");
        }
        logs.push(PretrainLog { step, loss });
    }
    Ok(logs)
}
