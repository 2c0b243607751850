//! Seeded synthetic corpus of span-labelled records and reasoning-marker
//! annotation.
//!
//! Records are assembled from a [`ScaffoldSpec`]: per disease and stage a
//! pool of discriminative phrases, per stage a pool of phrases shared by two
//! or more diseases, and a list of distractor phrases. Every stage element
//! becomes a character span of its stage. [`annotate`] wraps each span in
//! the stage's start/end marker pair.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagnostic stage. Order is fixed: physical examination, laboratory tests,
/// radiology report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Physical,
    Lab,
    Radiology,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Physical, Stage::Lab, Stage::Radiology];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Physical => "physical",
            Stage::Lab => "lab",
            Stage::Radiology => "radiology",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn open_marker(self) -> &'static str {
        match self {
            Stage::Physical => "<p>",
            Stage::Lab => "<l>",
            Stage::Radiology => "<r>",
        }
    }

    pub fn close_marker(self) -> &'static str {
        match self {
            Stage::Physical => "</p>",
            Stage::Lab => "</l>",
            Stage::Radiology => "</r>",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The six marker strings, open/close per stage.
pub const MARKERS: [&str; 6] = ["<p>", "</p>", "<l>", "</l>", "<r>", "</r>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedPhrase {
    pub phrase: String,
    pub diseases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaffoldSpec {
    pub diseases: Vec<String>,
    pub stages: Vec<Stage>,
    /// disease -> stage -> discriminative phrases
    pub elements: BTreeMap<String, BTreeMap<Stage, Vec<String>>>,
    pub shared_elements: BTreeMap<Stage, Vec<SharedPhrase>>,
    pub distractors: Vec<String>,
}

const DEFAULT_SCAFFOLD: &str = include_str!("../data/default_scaffold.json");

const OPENERS: [&str; 3] = [
    "patient presents with acute abdominal pain .",
    "patient admitted through the emergency department .",
    "adult seen for abdominal complaints .",
];

impl ScaffoldSpec {
    /// Three pseudo-diseases by three stages by four phrases.
    pub fn default_spec() -> Self {
        serde_json::from_str(DEFAULT_SCAFFOLD).expect("bundled scaffold parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ScaffoldSpec =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("scaffold: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn discriminative(&self, disease: &str, stage: Stage) -> &[String] {
        self.elements
            .get(disease)
            .and_then(|m| m.get(&stage))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn shared(&self, stage: Stage) -> &[SharedPhrase] {
        self.shared_elements
            .get(&stage)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.diseases.len() != 3 {
            return cfg(format!("expected 3 diseases, got {}", self.diseases.len()));
        }
        let unique: BTreeSet<&String> = self.diseases.iter().collect();
        if unique.len() != 3 {
            return cfg("disease names must be distinct".into());
        }
        if self.stages != Stage::ALL {
            return cfg("stages must be [physical, lab, radiology]".into());
        }
        let mut all_phrases: Vec<&str> = Vec::new();
        let mut discriminative: Vec<&str> = Vec::new();
        for disease in &self.diseases {
            for stage in Stage::ALL {
                let phrases = self.discriminative(disease, stage);
                if phrases.len() < 2 {
                    return cfg(format!(
                        "({disease}, {stage}) needs at least 2 discriminative phrases"
                    ));
                }
                if !self
                    .shared(stage)
                    .iter()
                    .any(|s| s.diseases.iter().any(|d| d == disease))
                {
                    return cfg(format!("({disease}, {stage}) needs at least 1 shared phrase"));
                }
                discriminative.extend(phrases.iter().map(String::as_str));
            }
        }
        for extra in self.elements.keys() {
            if !self.diseases.contains(extra) {
                return cfg(format!("elements name unknown disease {extra:?}"));
            }
        }
        for stage in Stage::ALL {
            for shared in self.shared(stage) {
                let set: BTreeSet<&String> = shared.diseases.iter().collect();
                if set.len() < 2 {
                    return cfg(format!("shared phrase {:?} lists fewer than 2 diseases", shared.phrase));
                }
                if let Some(d) = set.iter().find(|d| !self.diseases.contains(d)) {
                    return cfg(format!("shared phrase {:?} names unknown disease {d:?}", shared.phrase));
                }
                all_phrases.push(&shared.phrase);
            }
        }
        all_phrases.extend(discriminative.iter().copied());
        all_phrases.extend(self.distractors.iter().map(String::as_str));
        all_phrases.extend(OPENERS);
        for phrase in &all_phrases {
            if phrase.trim().is_empty() || phrase.trim() != *phrase {
                return cfg(format!("phrase {phrase:?} is empty or has surrounding whitespace"));
            }
            if MARKERS.iter().any(|m| phrase.contains(m)) {
                return cfg(format!("phrase {phrase:?} contains a marker string"));
            }
        }
        let distinct: BTreeSet<&str> = all_phrases.iter().copied().collect();
        if distinct.len() != all_phrases.len() {
            return cfg("every scaffold phrase must be unique".into());
        }
        // A discriminative phrase must never occur inside any other phrase,
        // otherwise the label stops being decidable from the text.
        for needle in &discriminative {
            let padded = format!(" {needle} ");
            if let Some(hay) = all_phrases
                .iter()
                .find(|hay| *hay != needle && format!(" {hay} ").contains(&padded))
            {
                return cfg(format!("discriminative phrase {needle:?} occurs inside {hay:?}"));
            }
        }
        Ok(())
    }

    fn check_confusers(&self) -> Result<()> {
        for disease in &self.diseases {
            for stage in Stage::ALL {
                if !self
                    .shared(stage)
                    .iter()
                    .any(|s| !s.diseases.contains(disease))
                {
                    return Err(Error::Config(format!(
                        "discrepant mode needs a {stage} shared phrase that excludes {disease}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Filler,
    StageElement,
    Distractor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment(pub String, pub SegmentKind);

impl Segment {
    pub fn text(&self) -> &str {
        &self.0
    }

    pub fn kind(&self) -> SegmentKind {
        self.1
    }
}

/// Half-open character interval `[start, end)`.
pub type CharSpan = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub text: String,
    pub label: String,
    pub spans: BTreeMap<Stage, Vec<CharSpan>>,
    pub segments: Vec<Segment>,
}

impl RawRecord {
    pub fn stages_present(&self) -> Vec<Stage> {
        Stage::ALL
            .into_iter()
            .filter(|s| self.spans.get(s).is_some_and(|v| !v.is_empty()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedRecord {
    pub base: RawRecord,
    pub annotated_text: String,
    /// Character offsets of the open and close marker of every span.
    pub marker_pairs: BTreeMap<Stage, Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Consistent,
    Discrepant,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consistent" => Ok(Difficulty::Consistent),
            "discrepant" => Ok(Difficulty::Discrepant),
            other => Err(Error::Config(format!("unknown corpus mode {other:?}"))),
        }
    }
}

struct Builder {
    segments: Vec<Segment>,
    elements: Vec<(Stage, usize)>,
}

impl Builder {
    fn push(&mut self, text: &str, kind: SegmentKind) {
        self.segments.push(Segment(text.to_string(), kind));
    }

    fn element(&mut self, stage: Stage, text: &str) {
        self.elements.push((stage, self.segments.len()));
        self.push(text, SegmentKind::StageElement);
    }

    fn finish(self, id: String, label: String) -> RawRecord {
        let mut text = String::new();
        let mut starts = Vec::with_capacity(self.segments.len());
        let mut pos = 0usize;
        for (i, seg) in self.segments.iter().enumerate() {
            if i > 0 {
                text.push(' ');
                pos += 1;
            }
            starts.push(pos);
            text.push_str(seg.text());
            pos += seg.text().chars().count();
        }
        let mut spans: BTreeMap<Stage, Vec<CharSpan>> = BTreeMap::new();
        for (stage, idx) in self.elements {
            let start = starts[idx];
            let end = start + self.segments[idx].text().chars().count();
            spans.entry(stage).or_default().push((start, end));
        }
        RawRecord {
            id,
            text,
            label,
            spans,
            segments: self.segments,
        }
    }
}

/// Generate `n_per_disease` records per disease. Output is a pure function of
/// `(spec, n_per_disease, seed, difficulty)`.
pub fn generate_corpus(
    spec: &ScaffoldSpec,
    n_per_disease: usize,
    seed: u64,
    difficulty: Difficulty,
) -> Result<Vec<RawRecord>> {
    spec.validate()?;
    if n_per_disease == 0 {
        return Err(Error::Config("n_per_disease must be at least 1".into()));
    }
    if difficulty == Difficulty::Discrepant {
        spec.check_confusers()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_disease * spec.diseases.len());
    for _ in 0..n_per_disease {
        for disease in &spec.diseases {
            let id = format!("rec-{:05}", out.len());
            out.push(generate_record(spec, disease, id, difficulty, &mut rng));
        }
    }
    Ok(out)
}

fn generate_record(
    spec: &ScaffoldSpec,
    disease: &str,
    id: String,
    difficulty: Difficulty,
    rng: &mut ChaCha8Rng,
) -> RawRecord {
    let mut present: Vec<Stage> = Stage::ALL.to_vec();
    if difficulty == Difficulty::Discrepant {
        let n_drop = rng.gen_range(1..=2);
        let mut order = Stage::ALL.to_vec();
        order.shuffle(rng);
        let dropped = &order[..n_drop];
        present.retain(|s| !dropped.contains(s));
    }

    let mut per_stage: BTreeMap<Stage, Vec<&str>> = BTreeMap::new();
    for &stage in &present {
        let pool = spec.discriminative(disease, stage);
        let mut picked: Vec<&str> = pool
            .choose_multiple(rng, 2)
            .map(String::as_str)
            .collect();
        let shared: Vec<&SharedPhrase> = spec
            .shared(stage)
            .iter()
            .filter(|s| s.diseases.iter().any(|d| d == disease))
            .collect();
        picked.push(&shared.choose(rng).expect("validated").phrase);
        picked.shuffle(rng);
        per_stage.insert(stage, picked);
    }

    if difficulty == Difficulty::Discrepant {
        let confusers: Vec<(Stage, &str)> = present
            .iter()
            .flat_map(|&stage| {
                spec.shared(stage)
                    .iter()
                    .filter(|s| !s.diseases.iter().any(|d| d == disease))
                    .map(move |s| (stage, s.phrase.as_str()))
            })
            .collect();
        let &(stage, phrase) = confusers.choose(rng).expect("checked by check_confusers");
        let list = per_stage.get_mut(&stage).expect("stage present");
        let at = rng.gen_range(0..=list.len());
        list.insert(at, phrase);
    }

    let mut b = Builder {
        segments: Vec::new(),
        elements: Vec::new(),
    };
    b.push(OPENERS.choose(rng).expect("non-empty"), SegmentKind::Filler);
    if !spec.distractors.is_empty() && rng.gen_bool(0.5) {
        b.push(spec.distractors.choose(rng).expect("non-empty"), SegmentKind::Distractor);
        b.push(".", SegmentKind::Filler);
    }
    for (stage, elements) in &per_stage {
        b.push(&format!("{stage} findings :"), SegmentKind::Filler);
        for (k, phrase) in elements.iter().enumerate() {
            if k > 0 {
                let sep = if k + 1 == elements.len() { "and" } else { "," };
                b.push(sep, SegmentKind::Filler);
            }
            b.element(*stage, phrase);
        }
        b.push(".", SegmentKind::Filler);
    }
    if !spec.distractors.is_empty() && rng.gen_bool(0.25) {
        b.push(spec.distractors.choose(rng).expect("non-empty"), SegmentKind::Distractor);
        b.push(".", SegmentKind::Filler);
    }
    b.finish(id, disease.to_string())
}

fn char_to_byte(text: &str) -> Vec<usize> {
    let mut map: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    map.push(text.len());
    map
}

/// Insert stage markers around every span: `x <p> RLQ pain </p> y`.
pub fn annotate(record: &RawRecord) -> Result<AnnotatedRecord> {
    let n_chars = record.text.chars().count();
    if let Some(m) = MARKERS.iter().find(|m| record.text.contains(*m)) {
        return Err(Error::Annotation(format!(
            "record {} already contains marker {m}",
            record.id
        )));
    }
    let mut all: Vec<(CharSpan, Stage)> = Vec::new();
    for (&stage, spans) in &record.spans {
        for &(s, e) in spans {
            if s >= e || e > n_chars {
                return Err(Error::Annotation(format!(
                    "record {}: {stage} span ({s}, {e}) outside text of {n_chars} chars",
                    record.id
                )));
            }
            all.push(((s, e), stage));
        }
    }
    all.sort();
    for w in all.windows(2) {
        if w[1].0 .0 < w[0].0 .1 {
            return Err(Error::Annotation(format!(
                "record {}: spans {:?} and {:?} overlap",
                record.id, w[0].0, w[1].0
            )));
        }
    }

    let bytes = char_to_byte(&record.text);
    let mut out = String::with_capacity(record.text.len() + all.len() * 12);
    let mut out_chars = 0usize;
    let mut prev = 0usize;
    let mut marker_pairs: BTreeMap<Stage, Vec<(usize, usize)>> = BTreeMap::new();
    let push = |out: &mut String, out_chars: &mut usize, s: &str| {
        out.push_str(s);
        *out_chars += s.chars().count();
    };
    for ((s, e), stage) in all {
        push(&mut out, &mut out_chars, &record.text[bytes[prev]..bytes[s]]);
        let open_pos = out_chars;
        push(&mut out, &mut out_chars, stage.open_marker());
        push(&mut out, &mut out_chars, " ");
        push(&mut out, &mut out_chars, &record.text[bytes[s]..bytes[e]]);
        push(&mut out, &mut out_chars, " ");
        let close_pos = out_chars;
        push(&mut out, &mut out_chars, stage.close_marker());
        marker_pairs.entry(stage).or_default().push((open_pos, close_pos));
        prev = e;
    }
    push(&mut out, &mut out_chars, &record.text[bytes[prev]..]);

    Ok(AnnotatedRecord {
        base: record.clone(),
        annotated_text: out,
        marker_pairs,
    })
}

/// Inverse of [`annotate`]'s text transformation.
pub fn strip_markers(annotated: &str) -> String {
    let opens: Vec<String> = Stage::ALL.iter().map(|s| format!("{} ", s.open_marker())).collect();
    let closes: Vec<String> = Stage::ALL.iter().map(|s| format!(" {}", s.close_marker())).collect();
    let mut out = String::with_capacity(annotated.len());
    let mut rest = annotated;
    'outer: while let Some(c) = rest.chars().next() {
        for pat in opens.iter().chain(closes.iter()) {
            if let Some(r) = rest.strip_prefix(pat.as_str()) {
                rest = r;
                continue 'outer;
            }
        }
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    /// `(train, held_out)` for `fold`, each in corpus order.
    pub fn split<'a, R>(&self, records: &'a [R], fold: usize, id: impl Fn(&R) -> &str) -> (Vec<&'a R>, Vec<&'a R>) {
        records
            .iter()
            .partition(|r| self.fold_of(id(r)) != Some(fold))
    }
}

/// Stratified, seeded k-fold assignment.
pub fn split_folds(corpus: &[RawRecord], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let mut by_label: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in corpus {
        by_label.entry(&r.label).or_default().push(&r.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    let mut offset = 0usize;
    for (label, mut ids) in by_label {
        if ids.len() < k {
            return Err(Error::Config(format!(
                "label {label} has {} records, fewer than k = {k}",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            if assignment.insert(id.to_string(), (i + offset) % k).is_some() {
                return Err(Error::Config(format!("duplicate record id {id}")));
            }
        }
        offset += ids.len();
    }
    Ok(FoldAssignment { k, assignment })
}

#[derive(Serialize, Deserialize)]
struct JsonlLine {
    id: String,
    text: String,
    annotated_text: String,
    label: String,
    spans: BTreeMap<Stage, Vec<CharSpan>>,
    segments: Vec<Segment>,
}

pub fn to_jsonl_line(record: &AnnotatedRecord) -> Result<String> {
    let line = JsonlLine {
        id: record.base.id.clone(),
        text: record.base.text.clone(),
        annotated_text: record.annotated_text.clone(),
        label: record.base.label.clone(),
        spans: record.base.spans.clone(),
        segments: record.base.segments.clone(),
    };
    Ok(serde_json::to_string(&line)?)
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[AnnotatedRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", to_jsonl_line(r)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_jsonl(text: &str) -> Result<Vec<AnnotatedRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonlLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let base = RawRecord {
            id: parsed.id,
            text: parsed.text,
            label: parsed.label,
            spans: parsed.spans,
            segments: parsed.segments,
        };
        let annotated = annotate(&base).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if annotated.annotated_text != parsed.annotated_text {
            return Err(Error::Parse {
                line: line_no,
                message: "annotated_text does not match spans".into(),
            });
        }
        out.push(annotated);
    }
    Ok(out)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<AnnotatedRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(text: &str, spans: &[(Stage, CharSpan)]) -> RawRecord {
        let mut map: BTreeMap<Stage, Vec<CharSpan>> = BTreeMap::new();
        for &(s, sp) in spans {
            map.entry(s).or_default().push(sp);
        }
        RawRecord {
            id: "t".into(),
            text: text.into(),
            label: "veltritis".into(),
            spans: map,
            segments: vec![Segment(text.into(), SegmentKind::Filler)],
        }
    }

    /// Reads only discriminative phrases; returns the unique best disease.
    fn rule_classifier(spec: &ScaffoldSpec, text: &str) -> Option<String> {
        let padded = format!(" {text} ");
        let counts: Vec<(usize, &String)> = spec
            .diseases
            .iter()
            .map(|d| {
                let n = Stage::ALL
                    .iter()
                    .flat_map(|&s| spec.discriminative(d, s))
                    .filter(|p| padded.contains(&format!(" {p} ")))
                    .count();
                (n, d)
            })
            .collect();
        let best = counts.iter().map(|c| c.0).max()?;
        let winners: Vec<_> = counts.iter().filter(|c| c.0 == best && best > 0).collect();
        (winners.len() == 1).then(|| winners[0].1.clone())
    }

    #[test]
    fn default_scaffold_is_valid() {
        ScaffoldSpec::default_spec().validate().unwrap();
    }

    #[test]
    fn invalid_scaffold_is_config_error() {
        let mut spec = ScaffoldSpec::default_spec();
        spec.diseases.pop();
        assert!(matches!(
            generate_corpus(&spec, 2, 1, Difficulty::Consistent),
            Err(Error::Config(_))
        ));
        let mut spec = ScaffoldSpec::default_spec();
        spec.elements
            .get_mut("veltritis")
            .unwrap()
            .get_mut(&Stage::Lab)
            .unwrap()
            .truncate(1);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let mut spec = ScaffoldSpec::default_spec();
        spec.distractors.push("rovsing sign present today".into());
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_records_rejected() {
        let spec = ScaffoldSpec::default_spec();
        assert!(generate_corpus(&spec, 0, 1, Difficulty::Consistent).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ScaffoldSpec::default_spec();
        let a = generate_corpus(&spec, 2, 7, Difficulty::Consistent).unwrap();
        let b = generate_corpus(&spec, 2, 7, Difficulty::Consistent).unwrap();
        let ja: Vec<String> = a.iter().map(|r| to_jsonl_line(&annotate(r).unwrap()).unwrap()).collect();
        let jb: Vec<String> = b.iter().map(|r| to_jsonl_line(&annotate(r).unwrap()).unwrap()).collect();
        assert_eq!(ja, jb);
    }

    #[test]
    fn count_contract_and_unique_ids() {
        let spec = ScaffoldSpec::default_spec();
        let c = generate_corpus(&spec, 10, 1, Difficulty::Consistent).unwrap();
        assert_eq!(c.len(), 30);
        for d in &spec.diseases {
            assert_eq!(c.iter().filter(|r| &r.label == d).count(), 10);
        }
        let ids: BTreeSet<&str> = c.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids.len(), 30);
    }

    #[test]
    fn raw_record_invariants_hold() {
        let spec = ScaffoldSpec::default_spec();
        for mode in [Difficulty::Consistent, Difficulty::Discrepant] {
            for r in generate_corpus(&spec, 20, 5, mode).unwrap() {
                let joined: Vec<&str> = r.segments.iter().map(Segment::text).collect();
                assert_eq!(joined.join(" "), r.text);
                let n = r.text.chars().count();
                let mut all: Vec<CharSpan> = r.spans.values().flatten().copied().collect();
                all.sort();
                assert!(all.iter().all(|&(s, e)| s < e && e <= n));
                assert!(all.windows(2).all(|w| w[0].1 <= w[1].0));
                assert!(spec.diseases.contains(&r.label));
            }
        }
    }

    #[test]
    fn consistent_mode_has_all_stages_and_is_decidable() {
        let spec = ScaffoldSpec::default_spec();
        let c = generate_corpus(&spec, 50, 11, Difficulty::Consistent).unwrap();
        for r in &c {
            assert_eq!(r.stages_present(), Stage::ALL.to_vec());
            assert_eq!(rule_classifier(&spec, &r.text).as_deref(), Some(r.label.as_str()));
        }
    }

    #[test]
    fn discrepant_mode_drops_stages_and_injects_confuser() {
        let spec = ScaffoldSpec::default_spec();
        let c = generate_corpus(&spec, 50, 3, Difficulty::Discrepant).unwrap();
        assert_eq!(c.len(), 150);
        for r in &c {
            let present = Stage::ALL.iter().filter(|s| r.spans.get(s).is_some_and(|v| !v.is_empty())).count();
            assert!((1..=2).contains(&present), "record {} has {present} stages", r.id);
            let confusers = r
                .segments
                .iter()
                .filter(|seg| {
                    Stage::ALL.iter().any(|&st| {
                        spec.shared(st)
                            .iter()
                            .any(|s| s.phrase == seg.0 && !s.diseases.contains(&r.label))
                    })
                })
                .count();
            assert_eq!(confusers, 1);
            assert_eq!(rule_classifier(&spec, &r.text).as_deref(), Some(r.label.as_str()));
        }
    }

    #[test]
    fn annotate_direct_substitution() {
        let r = record("x RLQ pain y", &[(Stage::Physical, (2, 10))]);
        let a = annotate(&r).unwrap();
        assert_eq!(a.annotated_text, "x <p> RLQ pain </p> y");
        assert_eq!(a.marker_pairs[&Stage::Physical], vec![(2, 15)]);
    }

    #[test]
    fn annotate_without_spans_is_identity() {
        let r = record("nothing to mark", &[]);
        let a = annotate(&r).unwrap();
        assert_eq!(a.annotated_text, r.text);
        assert!(a.marker_pairs.is_empty());
    }

    #[test]
    fn annotate_rejects_overlap_and_out_of_bounds() {
        let r = record("abcdef", &[(Stage::Physical, (0, 3)), (Stage::Lab, (2, 5))]);
        assert!(matches!(annotate(&r), Err(Error::Annotation(_))));
        let r = record("abc", &[(Stage::Lab, (1, 9))]);
        assert!(matches!(annotate(&r), Err(Error::Annotation(_))));
    }

    #[test]
    fn adjacent_spans_round_trip() {
        let r = record("abcd", &[(Stage::Physical, (0, 2)), (Stage::Lab, (2, 4))]);
        let a = annotate(&r).unwrap();
        assert_eq!(strip_markers(&a.annotated_text), "abcd");
    }

    #[test]
    fn corpus_round_trip_and_marker_counts() {
        let spec = ScaffoldSpec::default_spec();
        for mode in [Difficulty::Consistent, Difficulty::Discrepant] {
            for r in generate_corpus(&spec, 30, 9, mode).unwrap() {
                let a = annotate(&r).unwrap();
                assert_eq!(strip_markers(&a.annotated_text), r.text);
                for (stage, spans) in &r.spans {
                    let pairs = &a.marker_pairs[stage];
                    assert_eq!(pairs.len(), spans.len());
                    for &(o, c) in pairs {
                        let chars: Vec<char> = a.annotated_text.chars().collect();
                        let open: String = chars[o..o + 3].iter().collect();
                        let close: String = chars[c..c + 4].iter().collect();
                        assert_eq!(open, stage.open_marker());
                        assert_eq!(close, stage.close_marker());
                    }
                }
            }
        }
    }

    fn balanced(per_label: usize) -> Vec<RawRecord> {
        let spec = ScaffoldSpec::default_spec();
        generate_corpus(&spec, per_label, 2, Difficulty::Consistent).unwrap()
    }

    fn fold_histogram(corpus: &[RawRecord], f: &FoldAssignment) -> Vec<BTreeMap<String, usize>> {
        let mut h = vec![BTreeMap::new(); f.k];
        for r in corpus {
            *h[f.fold_of(&r.id).unwrap()].entry(r.label.clone()).or_insert(0) += 1;
        }
        h
    }

    #[test]
    fn five_folds_of_thirty() {
        let corpus = balanced(10);
        let f = split_folds(&corpus, 5, 1).unwrap();
        for fold in fold_histogram(&corpus, &f) {
            assert_eq!(fold.values().sum::<usize>(), 6);
            assert!(fold.values().all(|&n| n == 2));
        }
        assert_eq!(f, split_folds(&corpus, 5, 1).unwrap());
    }

    #[test]
    fn two_folds_of_twelve() {
        let corpus = balanced(4);
        let f = split_folds(&corpus, 2, 8).unwrap();
        // counting oracle: 4 per label over 2 folds -> 2 per label per fold
        for fold in fold_histogram(&corpus, &f) {
            assert_eq!(fold.values().sum::<usize>(), 6);
            assert!(fold.values().all(|&n| n == 2));
        }
    }

    #[test]
    fn uneven_folds_differ_by_at_most_one_per_label() {
        let corpus = balanced(7);
        let f = split_folds(&corpus, 3, 4).unwrap();
        let h = fold_histogram(&corpus, &f);
        for label in ScaffoldSpec::default_spec().diseases {
            let counts: Vec<usize> = h.iter().map(|m| m.get(&label).copied().unwrap_or(0)).collect();
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
        assert_eq!(f.assignment.len(), corpus.len());
    }

    #[test]
    fn too_few_records_per_label() {
        let corpus = balanced(2);
        assert!(matches!(split_folds(&corpus, 5, 1), Err(Error::Config(_))));
        assert!(matches!(split_folds(&corpus, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let recs: Vec<AnnotatedRecord> = balanced(10).iter().map(|r| annotate(r).unwrap()).collect();
        write_jsonl(&path, &recs).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), recs);
    }

    #[test]
    fn jsonl_truncated_line_and_empty_file() {
        let recs: Vec<AnnotatedRecord> = balanced(1).iter().map(|r| annotate(r).unwrap()).collect();
        let mut text: String = recs.iter().map(|r| to_jsonl_line(r).unwrap() + "\n").collect();
        let keep = text.len() - 20;
        text.truncate(keep);
        match parse_jsonl(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_jsonl("").unwrap().is_empty());
    }
}
