//! Diagnosis runs and the evaluation metrics computed from them.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headid::HeadSelection;
use crate::model::{generate, AttentionCapture, LanguageModel, RowKind};
use crate::rgtrain::attention_fraction;
use crate::synthcorpus::{AnnotatedRecord, Segment, SegmentKind, Stage};
use crate::tokenizer::{encode, encode_plain, TokenRange, Vocabulary, DIAGNOSIS_SUFFIX, EOT};

pub const GENERATE_BUDGET: usize = 8;
pub const RAF_TOP_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiagnoseMode {
    Generate,
    Constrained,
}

impl FromStr for DiagnoseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generate" => Ok(DiagnoseMode::Generate),
            "constrained" => Ok(DiagnoseMode::Constrained),
            other => Err(Error::Config(format!("unknown diagnosis mode {other:?}"))),
        }
    }
}

/// A record prepared for diagnosis: prompt ids plus the alignment data the
/// attention metrics need.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub gold: String,
    pub prompt: Vec<u32>,
    pub stage_ranges: BTreeMap<Stage, Vec<TokenRange>>,
    /// Segment index per prompt position.
    pub segment_of: Vec<Option<usize>>,
    pub segments: Vec<Segment>,
}

impl EvalRecord {
    pub fn from_record(record: &AnnotatedRecord, vocab: &Vocabulary, annotated: bool) -> Result<Self> {
        let rec = if annotated {
            encode(record, vocab)?
        } else {
            encode_plain(record, vocab)?
        };
        let mut prompt = rec.ids;
        let mut segment_of = rec.segment_of;
        let suffix = vocab.encode_text(DIAGNOSIS_SUFFIX);
        segment_of.extend(std::iter::repeat(None).take(suffix.len()));
        prompt.extend(suffix);
        Ok(Self {
            id: record.base.id.clone(),
            gold: record.base.label.clone(),
            prompt,
            stage_ranges: rec.stage_ranges,
            segment_of,
            segments: record.base.segments.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisResult {
    pub record: EvalRecord,
    pub predicted: Option<String>,
    pub generated: Vec<u32>,
    pub capture: AttentionCapture,
}

impl DiagnosisResult {
    pub fn correct(&self) -> bool {
        self.predicted.as_deref() == Some(self.record.gold.as_str())
    }
}

fn find(hay: &[u32], needle: &[u32]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

fn log_softmax(row: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

/// Diagnose one record. `labels` are the candidate label strings.
pub fn diagnose<M: LanguageModel + ?Sized>(
    model: &M,
    record: &EvalRecord,
    labels: &[String],
    vocab: &Vocabulary,
    mode: DiagnoseMode,
) -> Result<DiagnosisResult> {
    let cands: Vec<(String, Vec<u32>)> = labels.iter().map(|l| (l.clone(), vocab.encode_text(l))).collect();
    match mode {
        DiagnoseMode::Generate => {
            let g = generate(model, &record.prompt, GENERATE_BUDGET, true)?;
            let predicted = cands
                .iter()
                .filter_map(|(l, ids)| find(&g.ids, ids).map(|p| (p, l)))
                .min_by_key(|(p, _)| *p)
                .map(|(_, l)| l.clone());
            Ok(DiagnosisResult {
                record: record.clone(),
                predicted,
                generated: g.ids,
                capture: g.capture.expect("capture requested"),
            })
        }
        DiagnoseMode::Constrained => {
            let mut order: Vec<&(String, Vec<u32>)> = cands.iter().collect();
            order.sort_by(|a, b| a.1.cmp(&b.1));
            let mut best: Option<(f64, &(String, Vec<u32>), AttentionCapture)> = None;
            for cand in order {
                let mut seq = record.prompt.clone();
                seq.extend_from_slice(&cand.1);
                let (logits, cap) = model.logits(&seq, true)?;
                let p = record.prompt.len();
                let score: f64 = cand
                    .1
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| log_softmax(logits.row(p - 1 + i))[t as usize])
                    .sum();
                if best.as_ref().map_or(true, |b| score > b.0) {
                    let rows: Vec<usize> = (p - 1..p - 1 + cand.1.len()).collect();
                    let mut cap = cap.expect("capture requested").select_rows(&rows);
                    cap.row_kinds = vec![RowKind::Generated; rows.len()];
                    best = Some((score, cand, cap));
                }
            }
            let (_, cand, capture) = best.ok_or_else(|| Error::Config("no candidate labels".into()))?;
            Ok(DiagnosisResult {
                record: record.clone(),
                predicted: Some(cand.0.clone()),
                generated: cand.1.clone(),
                capture,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySuite {
    pub overall: f64,
    pub per_class_recall: BTreeMap<String, f64>,
    pub macro_f1: f64,
}

/// Accuracy, recall per label and macro-F1 over labels present in gold.
/// Abstentions count as wrong; labels absent from gold get a NaN recall.
pub fn accuracy_suite(pairs: &[(Option<String>, String)], labels: &[String]) -> Result<AccuracySuite> {
    if pairs.is_empty() {
        return Err(Error::Definition("accuracy of zero results".into()));
    }
    let correct = pairs.iter().filter(|(p, g)| p.as_ref() == Some(g)).count();
    let mut per_class_recall = BTreeMap::new();
    let mut f1s = Vec::new();
    for l in labels {
        let gold = pairs.iter().filter(|(_, g)| g == l).count();
        let pred = pairs.iter().filter(|(p, _)| p.as_ref() == Some(l)).count();
        let tp = pairs.iter().filter(|(p, g)| g == l && p.as_ref() == Some(l)).count();
        if gold == 0 {
            per_class_recall.insert(l.clone(), f64::NAN);
            continue;
        }
        let recall = tp as f64 / gold as f64;
        let precision = if pred == 0 { 0.0 } else { tp as f64 / pred as f64 };
        per_class_recall.insert(l.clone(), recall);
        f1s.push(if tp == 0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        });
    }
    let macro_f1 = if f1s.is_empty() {
        f64::NAN
    } else {
        f1s.iter().sum::<f64>() / f1s.len() as f64
    };
    Ok(AccuracySuite {
        overall: correct as f64 / pairs.len() as f64,
        per_class_recall,
        macro_f1,
    })
}

pub fn accuracy_of(results: &[DiagnosisResult], labels: &[String]) -> Result<AccuracySuite> {
    let pairs: Vec<(Option<String>, String)> = results
        .iter()
        .map(|r| (r.predicted.clone(), r.record.gold.clone()))
        .collect();
    accuracy_suite(&pairs, labels)
}

/// Mean attention fraction of the selected heads on one record's spans, or
/// `None` when no selected head's stage occurs in it.
pub fn record_focus(result: &DiagnosisResult, heads: &HeadSelection) -> Result<Option<f64>> {
    let rows = result.capture.generated_rows();
    if rows.is_empty() {
        return Ok(None);
    }
    let cap = result.capture.select_rows(&rows);
    let n = cap.n_keys();
    let mut fracs = Vec::new();
    for (stage, h) in heads.pairs() {
        let Some(ranges) = result.record.stage_ranges.get(&stage) else { continue };
        if ranges.is_empty() {
            continue;
        }
        fracs.push(attention_fraction(cap.head(h.layer, h.head), ranges, n)?);
    }
    Ok((!fracs.is_empty()).then(|| fracs.iter().sum::<f64>() / fracs.len() as f64))
}

pub fn reasoning_focus_score(results: &[DiagnosisResult], heads: &HeadSelection) -> Result<f64> {
    let mut scores = Vec::new();
    for r in results {
        if let Some(s) = record_focus(r, heads)? {
            scores.push(s);
        }
    }
    if scores.is_empty() {
        return Err(Error::Definition("no record carries spans for the selected heads".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentStat {
    pub attended: usize,
    pub present: usize,
    pub frequency: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentAttentionReport(pub BTreeMap<String, SegmentStat>);

/// Key positions ranked by attention received over all layers, heads and
/// generated rows; ties toward the earlier position.
pub fn top_attended_positions(capture: &AttentionCapture, k: usize) -> Vec<usize> {
    let rows = capture.generated_rows();
    let mut received = vec![0.0; capture.n_keys()];
    for l in 0..capture.n_layers() {
        for h in 0..capture.n_heads() {
            let a = capture.head(l, h);
            for &r in &rows {
                for (key, &v) in a.row(r).iter().enumerate() {
                    received[key] += v;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..received.len()).collect();
    order.sort_by(|&a, &b| received[b].total_cmp(&received[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn reasoning_attention_frequency(results: &[DiagnosisResult], top_k: usize) -> SegmentAttentionReport {
    let mut stats: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in results {
        let informative = |i: usize| r.record.segments[i].kind() != SegmentKind::Filler;
        let present: BTreeSet<&str> = r
            .record
            .segments
            .iter()
            .filter(|s| s.kind() != SegmentKind::Filler)
            .map(|s| s.text())
            .collect();
        let attended: BTreeSet<&str> = top_attended_positions(&r.capture, top_k)
            .into_iter()
            .filter_map(|p| r.record.segment_of.get(p).copied().flatten())
            .filter(|&i| informative(i))
            .map(|i| r.record.segments[i].text())
            .collect();
        for s in present {
            let e = stats.entry(s.to_string()).or_default();
            e.1 += 1;
            if attended.contains(s) {
                e.0 += 1;
            }
        }
    }
    SegmentAttentionReport(
        stats
            .into_iter()
            .map(|(k, (a, p))| {
                (
                    k,
                    SegmentStat {
                        attended: a,
                        present: p,
                        frequency: a as f64 / p as f64,
                    },
                )
            })
            .collect(),
    )
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn rouge_l_f1<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Definition("ROUGE-L against an empty reference".into()));
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Generated tokens up to (not including) the end token.
pub fn answer_tokens(generated: &[u32]) -> &[u32] {
    let end = generated.iter().position(|&t| t == EOT).unwrap_or(generated.len());
    &generated[..end]
}

pub fn mean_rouge_l(results: &[DiagnosisResult], vocab: &Vocabulary) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Definition("ROUGE-L over zero results".into()));
    }
    let mut total = 0.0;
    for r in results {
        total += rouge_l_f1(answer_tokens(&r.generated), &vocab.encode_text(&r.record.gold))?;
    }
    Ok(total / results.len() as f64)
}

pub const WILCOXON_MAX_N: usize = 20;

/// Exact one-sided signed-rank p value `Pr(W+ >= observed)` under the null.
/// Zero differences are dropped; tied magnitudes share their average rank.
/// NaN when every difference is zero.
pub fn wilcoxon_one_sided(differences: &[f64]) -> Result<f64> {
    if differences.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite difference".into()));
    }
    let mut d: Vec<f64> = differences.iter().copied().filter(|&x| x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(f64::NAN);
    }
    if n > WILCOXON_MAX_N {
        return Err(Error::Definition(format!(
            "exact signed-rank test supports at most {WILCOXON_MAX_N} non-zero differences, got {n}"
        )));
    }
    d.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    // Doubled average ranks stay integral.
    let mut ranks2 = vec![0usize; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        for r in &mut ranks2[i..=j] {
            *r = i + j + 2;
        }
        i = j + 1;
    }
    let observed: usize = d.iter().zip(&ranks2).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let total: usize = ranks2.iter().sum();
    let mut ways = vec![0u64; total + 1];
    ways[0] = 1;
    for &r in &ranks2 {
        for s in (r..=total).rev() {
            ways[s] += ways[s - r];
        }
    }
    let hits: u64 = ways[observed..].iter().sum();
    Ok(hits as f64 / (1u64 << n) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RafEntry {
    pub segment: String,
    pub frequency: f64,
    pub attended: usize,
    pub present: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: f64,
    pub per_class: BTreeMap<String, f64>,
    pub macro_f1: f64,
    pub rfs: Option<f64>,
    pub rouge_l: f64,
    pub raf: Vec<RafEntry>,
    pub wilcoxon: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn build(
        results: &[DiagnosisResult],
        labels: &[String],
        heads: Option<&HeadSelection>,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let acc = accuracy_of(results, labels)?;
        let rfs = heads.map(|h| reasoning_focus_score(results, h)).transpose()?;
        let raf = reasoning_attention_frequency(results, RAF_TOP_K)
            .0
            .into_iter()
            .map(|(segment, s)| RafEntry {
                segment,
                frequency: s.frequency,
                attended: s.attended,
                present: s.present,
            })
            .collect();
        Ok(Self {
            overall: acc.overall,
            per_class: acc.per_class_recall,
            macro_f1: acc.macro_f1,
            rfs,
            rouge_l: mean_rouge_l(results, vocab)?,
            raf,
            wilcoxon: BTreeMap::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::headid::HeadId;
    use ndarray::{Array2, Array4};

    fn s(x: &str) -> String {
        x.to_string()
    }

    #[test]
    fn accuracy_hand_count() {
        let labels = vec![s("A"), s("B"), s("C")];
        let pairs = vec![
            (Some(s("A")), s("A")),
            (Some(s("B")), s("A")),
            (Some(s("B")), s("B")),
        ];
        let a = accuracy_suite(&pairs, &labels).unwrap();
        assert!((a.overall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.per_class_recall["A"], 0.5);
        assert_eq!(a.per_class_recall["B"], 1.0);
        assert!(a.per_class_recall["C"].is_nan());
        // F1(A) = 2*1*0.5/1.5, F1(B) = 2*0.5*1/1.5
        assert!((a.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_fixed_point_and_abstain() {
        let labels = vec![s("A"), s("B")];
        let pairs = vec![(Some(s("A")), s("A")), (Some(s("B")), s("B"))];
        let a = accuracy_suite(&pairs, &labels).unwrap();
        assert_eq!((a.overall, a.macro_f1), (1.0, 1.0));
        assert!(a.per_class_recall.values().all(|&v| v == 1.0));
        let a = accuracy_suite(&[(None, s("A"))], &labels).unwrap();
        assert_eq!(a.overall, 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l_f1(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        assert!((rouge_l_f1(&["a", "b", "c"], &["a", "c"]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l_f1(&["x"], &["a", "c"]).unwrap(), 0.0);
        assert_eq!(rouge_l_f1::<&str>(&[], &["a"]).unwrap(), 0.0);
        assert!(rouge_l_f1::<&str>(&["a"], &[]).is_err());
    }

    #[test]
    fn wilcoxon_examples() {
        assert_eq!(wilcoxon_one_sided(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap(), 0.03125);
        assert_eq!(wilcoxon_one_sided(&[2.0]).unwrap(), 0.5);
        assert_eq!(wilcoxon_one_sided(&[-2.0]).unwrap(), 1.0);
        // |d| ranks: 1,1 tie -> 1.5 each, 2 -> 3, 3 -> 4; W+ = 1.5 + 3 + 4.
        assert_eq!(wilcoxon_one_sided(&[3.0, 1.0, 2.0, -1.0]).unwrap(), 3.0 / 16.0);
        assert!(wilcoxon_one_sided(&[0.0, 0.0]).unwrap().is_nan());
        assert!(wilcoxon_one_sided(&[1.0; 21]).is_err());
        assert_eq!(wilcoxon_one_sided(&[0.0, 1.0]).unwrap(), 0.5);
    }

    fn result_with(capture: AttentionCapture, ranges: &[(Stage, usize, usize)], segment_of: Vec<Option<usize>>, segments: Vec<Segment>) -> DiagnosisResult {
        let mut stage_ranges: BTreeMap<Stage, Vec<TokenRange>> = BTreeMap::new();
        for &(st, a, b) in ranges {
            stage_ranges.entry(st).or_default().push(TokenRange::new(a, b).unwrap());
        }
        DiagnosisResult {
            record: EvalRecord {
                id: s("r"),
                gold: s("A"),
                prompt: vec![],
                stage_ranges,
                segment_of,
                segments,
            },
            predicted: None,
            generated: vec![],
            capture,
        }
    }

    fn one_head(rows: Array2<f64>) -> AttentionCapture {
        let (r, k) = rows.dim();
        let data = rows.into_shape_with_order((1, 1, r, k)).unwrap();
        AttentionCapture {
            data,
            row_kinds: vec![RowKind::Generated; r],
        }
    }

    #[test]
    fn focus_score_cases() {
        let heads = HeadSelection(BTreeMap::from([(Stage::Lab, vec![HeadId::new(0, 0)])]));
        let uniform = one_head(Array2::from_elem((2, 4), 0.25));
        let r1 = result_with(uniform.clone(), &[(Stage::Lab, 1, 2)], vec![], vec![]);
        assert_eq!(reasoning_focus_score(&[r1.clone()], &heads).unwrap(), 0.5);
        let focused = one_head(ndarray::arr2(&[[0.0, 1.0, 0.0], [0.5, 0.5, 0.0]]));
        let r2 = result_with(focused, &[(Stage::Lab, 1, 2)], vec![], vec![]);
        assert_eq!(reasoning_focus_score(&[r2.clone()], &heads).unwrap(), 1.0);
        assert_eq!(reasoning_focus_score(&[r1.clone(), r2.clone()], &heads).unwrap(), 0.75);
        let absent = result_with(uniform, &[(Stage::Physical, 1, 2)], vec![], vec![]);
        assert_eq!(reasoning_focus_score(&[r1, absent.clone()], &heads).unwrap(), 0.5);
        assert!(reasoning_focus_score(&[absent], &heads).is_err());
    }

    #[test]
    fn frequency_toy_enumeration() {
        // Segment 0 is filler; 1 and 2 carry findings. Position 1 gets the
        // maximum in record a, position 2 in record b; with top-1 only the
        // winning segment counts.
        let segs = vec![
            Segment(s("intro"), SegmentKind::Filler),
            Segment(s("alpha"), SegmentKind::StageElement),
            Segment(s("beta"), SegmentKind::StageElement),
        ];
        let seg_of = vec![Some(0), Some(1), Some(2)];
        let row = |v: [f64; 3]| one_head(Array2::from_shape_vec((1, 3), v.to_vec()).unwrap());
        let a = result_with(row([0.1, 0.6, 0.3]), &[], seg_of.clone(), segs.clone());
        let b = result_with(row([0.1, 0.3, 0.6]), &[], seg_of.clone(), segs.clone());
        let c = result_with(row([0.2, 0.7, 0.1]), &[], seg_of[..2].to_vec(), segs[..2].to_vec());
        let rep = reasoning_attention_frequency(&[a, b, c], 1);
        assert_eq!(rep.0["alpha"].frequency, 2.0 / 3.0);
        assert_eq!(rep.0["beta"].frequency, 0.5);
        assert!(!rep.0.contains_key("intro"));
        let filler_top = result_with(row([0.9, 0.05, 0.05]), &[], seg_of, segs);
        let rep = reasoning_attention_frequency(&[filler_top], 1);
        assert_eq!(rep.0["alpha"].attended, 0);
    }

    #[test]
    fn top_positions_rank_with_ties() {
        let mut data = Array4::zeros((2, 1, 1, 4));
        data[[0, 0, 0, 2]] = 0.5;
        data[[0, 0, 0, 1]] = 0.5;
        data[[1, 0, 0, 3]] = 1.0;
        let cap = AttentionCapture {
            data,
            row_kinds: vec![RowKind::Generated],
        };
        assert_eq!(top_attended_positions(&cap, 3), vec![3, 1, 2]);
    }

    #[test]
    fn answer_tokens_stop_at_end() {
        assert_eq!(answer_tokens(&[5, 6, EOT, 7]), &[5, 6]);
        assert_eq!(answer_tokens(&[5]), &[5]);
    }
}
