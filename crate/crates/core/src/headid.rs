//! Etiology-aware head identification: score every (layer, head) by how
//! often its per-step attention argmax during generation lands inside the
//! annotated stage spans, then rank and select heads per stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate, AttentionCapture, LanguageModel};
use crate::synthcorpus::Stage;
use crate::tokenizer::{TokenRange, TokenizedRecord, Vocabulary, IDENTIFICATION_TEMPLATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.layer, self.head)
    }
}

impl From<[usize; 2]> for HeadId {
    fn from([layer, head]: [usize; 2]) -> Self {
        Self { layer, head }
    }
}

impl From<HeadId> for [usize; 2] {
    fn from(h: HeadId) -> Self {
        [h.layer, h.head]
    }
}

/// Stage → ordered heads. Serialized as `{stage: [[layer, head], ...]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HeadSelection(pub BTreeMap<Stage, Vec<HeadId>>);

impl HeadSelection {
    pub fn validate(&self, n_layers: usize, n_heads: usize) -> Result<()> {
        for (stage, heads) in &self.0 {
            let mut seen = BTreeSet::new();
            for h in heads {
                if h.layer >= n_layers || h.head >= n_heads {
                    return Err(Error::Config(format!(
                        "{stage} head {} outside a {n_layers}x{n_heads} model",
                        h.label()
                    )));
                }
                if !seen.insert(*h) {
                    return Err(Error::Config(format!("{stage} lists head {} twice", h.label())));
                }
            }
        }
        Ok(())
    }

    /// Every (stage, head) pair in stage then list order.
    pub fn pairs(&self) -> Vec<(Stage, HeadId)> {
        self.0
            .iter()
            .flat_map(|(&s, hs)| hs.iter().map(move |&h| (s, h)))
            .collect()
    }

    /// Heads by layer partition: first quarter of layers → physical, middle
    /// half → radiology, last quarter → lab; every head in those layers.
    pub fn layer_partition(n_layers: usize, n_heads: usize) -> Self {
        let q = (n_layers / 4).max(1).min(n_layers);
        let all = |layers: std::ops::Range<usize>| -> Vec<HeadId> {
            layers
                .flat_map(|l| (0..n_heads).map(move |h| HeadId::new(l, h)))
                .collect()
        };
        let last_start = n_layers.saturating_sub(q).max(q.min(n_layers));
        let mut map = BTreeMap::new();
        map.insert(Stage::Physical, all(0..q));
        map.insert(Stage::Radiology, all(q..last_start));
        map.insert(Stage::Lab, all(last_start..n_layers));
        Self(map)
    }
}

/// Scores `[stage, layer, head]` with per-stage instance counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EasMatrix {
    pub scores: Array3<f64>,
    pub instances: [usize; 3],
    pub dataset: String,
}

impl EasMatrix {
    pub fn n_layers(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn n_heads(&self) -> usize {
        self.scores.shape()[2]
    }

    pub fn score(&self, stage: Stage, h: HeadId) -> f64 {
        self.scores[[stage.index(), h.layer, h.head]]
    }
}

/// Identification prompt ids with stage ranges shifted to prompt positions.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationInstance {
    pub ids: Vec<u32>,
    pub stage_ranges: BTreeMap<Stage, Vec<TokenRange>>,
}

pub fn identification_prompt(record: &TokenizedRecord, vocab: &Vocabulary) -> IdentificationInstance {
    let (head, rest) = IDENTIFICATION_TEMPLATE
        .split_once("{Information}")
        .expect("template has an information slot");
    let (mid, tail) = rest.split_once("{Diagnosis}").expect("template has a diagnosis slot");
    let mut ids = vocab.encode_text(head);
    let offset = ids.len();
    ids.extend_from_slice(&record.ids);
    ids.extend(vocab.encode_text(mid));
    ids.extend_from_slice(&record.label_ids);
    ids.extend(vocab.encode_text(tail));
    let stage_ranges = record
        .stage_ranges
        .iter()
        .map(|(&s, rs)| (s, rs.iter().map(|r| r.shifted(offset)).collect()))
        .collect();
    IdentificationInstance { ids, stage_ranges }
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

/// Per-stage `[layer, head]` contributions of one instance: hits over the
/// generated rows divided by the stage's token count. Stages without
/// ranges are absent.
pub fn instance_contributions(
    capture: &AttentionCapture,
    ranges: &BTreeMap<Stage, Vec<TokenRange>>,
) -> BTreeMap<Stage, Array2<f64>> {
    let rows = capture.generated_rows();
    let (nl, nh) = (capture.n_layers(), capture.n_heads());
    let mut out = BTreeMap::new();
    for (&stage, rs) in ranges {
        let count: usize = rs.iter().map(TokenRange::len).sum();
        if count == 0 {
            continue;
        }
        let mut m = Array2::zeros((nl, nh));
        for l in 0..nl {
            for h in 0..nh {
                let a = capture.head(l, h);
                let hits = rows
                    .iter()
                    .filter(|&&r| {
                        let pos = argmax_lowest(a.row(r)) + 1;
                        rs.iter().any(|range| range.contains(pos))
                    })
                    .count();
                m[[l, h]] = hits as f64 / count as f64;
            }
        }
        out.insert(stage, m);
    }
    out
}

/// Mean of instance contributions per stage, over instances containing it.
pub fn aggregate(
    contributions: &[BTreeMap<Stage, Array2<f64>>],
    n_layers: usize,
    n_heads: usize,
    dataset: &str,
) -> EasMatrix {
    let mut scores = Array3::zeros((3, n_layers, n_heads));
    let mut instances = [0usize; 3];
    for c in contributions {
        for (stage, m) in c {
            let mut slot = scores.index_axis_mut(ndarray::Axis(0), stage.index());
            slot += m;
            instances[stage.index()] += 1;
        }
    }
    for s in Stage::ALL {
        if instances[s.index()] > 0 {
            let n = instances[s.index()] as f64;
            scores
                .index_axis_mut(ndarray::Axis(0), s.index())
                .mapv_inplace(|v| v / n);
        }
    }
    EasMatrix {
        scores,
        instances,
        dataset: dataset.to_string(),
    }
}

/// Score every head on `records` (annotated encodings with gold labels).
pub fn etiology_aware_scores<M: LanguageModel + ?Sized>(
    model: &M,
    records: &[TokenizedRecord],
    vocab: &Vocabulary,
    max_new: usize,
    dataset: &str,
) -> Result<EasMatrix> {
    if records.is_empty() {
        return Err(Error::Definition("head identification on an empty dataset".into()));
    }
    let mut contributions = Vec::with_capacity(records.len());
    let mut shape = None;
    for (i, rec) in records.iter().enumerate() {
        if !rec.has_ranges() {
            warn!("record {i} has no stage ranges; skipped");
            continue;
        }
        let inst = identification_prompt(rec, vocab);
        let g = generate(model, &inst.ids, max_new, true)?;
        let cap = g.capture.expect("capture requested");
        shape = Some((cap.n_layers(), cap.n_heads()));
        contributions.push(instance_contributions(&cap, &inst.stage_ranges));
    }
    let (nl, nh) = shape.ok_or_else(|| Error::Definition("no record carries stage ranges".into()))?;
    Ok(aggregate(&contributions, nl, nh, dataset))
}

/// Descending score; ties by (layer, head) ascending.
pub fn top_k_heads(eas: &EasMatrix, stage: Stage, k: usize) -> Vec<HeadId> {
    let mut all: Vec<HeadId> = (0..eas.n_layers())
        .flat_map(|l| (0..eas.n_heads()).map(move |h| HeadId::new(l, h)))
        .collect();
    all.sort_by(|a, b| {
        eas.score(stage, *b)
            .total_cmp(&eas.score(stage, *a))
            .then(a.cmp(b))
    });
    all.truncate(k);
    all
}

pub fn select_heads(eas: &EasMatrix, per_stage_count: usize) -> Result<HeadSelection> {
    if per_stage_count == 0 {
        return Err(Error::Config("per_stage_count must be >= 1".into()));
    }
    Ok(HeadSelection(
        Stage::ALL
            .iter()
            .map(|&s| (s, top_k_heads(eas, s, per_stage_count)))
            .collect(),
    ))
}

pub fn jaccard(a: &BTreeSet<HeadId>, b: &BTreeSet<HeadId>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Definition("jaccard of an empty head set".into()));
    }
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    Ok(inter as f64 / union as f64)
}

pub fn jaccard_matrix(sets: &[(String, BTreeSet<HeadId>)]) -> Result<Array2<f64>> {
    let n = sets.len();
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            m[[i, j]] = jaccard(&sets[i].1, &sets[j].1)?;
        }
    }
    Ok(m)
}

/// Stage scores divided by the stage maximum, `[layer, head]`.
pub fn normalize_for_display(eas: &EasMatrix, stage: Stage) -> Array2<f64> {
    let s = eas.scores.index_axis(ndarray::Axis(0), stage.index());
    let max = s.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        warn!("all {stage} scores are zero");
        return Array2::zeros(s.raw_dim());
    }
    s.mapv(|v| v / max)
}

pub fn eas_csv(eas: &EasMatrix) -> String {
    let mut out = String::from("stage,layer,head,raw_score,display_score,instances\n");
    for s in Stage::ALL {
        let disp = normalize_for_display(eas, s);
        for l in 0..eas.n_layers() {
            for h in 0..eas.n_heads() {
                let _ = writeln!(
                    out,
                    "{},{l},{h},{},{},{}",
                    s.name(),
                    eas.scores[[s.index(), l, h]],
                    disp[[l, h]],
                    eas.instances[s.index()]
                );
            }
        }
    }
    out
}

pub fn parse_eas_csv(text: &str, dataset: &str) -> Result<EasMatrix> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let stage = Stage::from_name(f[0]).ok_or_else(|| bad("unknown stage"))?;
        let l: usize = f[1].parse().map_err(|_| bad("bad layer"))?;
        let h: usize = f[2].parse().map_err(|_| bad("bad head"))?;
        let raw: f64 = f[3].parse().map_err(|_| bad("bad score"))?;
        let n: usize = f[5].parse().map_err(|_| bad("bad instance count"))?;
        rows.push((stage, l, h, raw, n));
    }
    let nl = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    let nh = rows.iter().map(|r| r.2 + 1).max().unwrap_or(0);
    if nl == 0 || rows.len() != 3 * nl * nh {
        return Err(Error::Parse {
            line: 1,
            message: "score table is not a full stage x layer x head grid".into(),
        });
    }
    let mut scores = Array3::zeros((3, nl, nh));
    let mut instances = [0; 3];
    for (s, l, h, raw, n) in rows {
        scores[[s.index(), l, h]] = raw;
        instances[s.index()] = n;
    }
    Ok(EasMatrix {
        scores,
        instances,
        dataset: dataset.to_string(),
    })
}
