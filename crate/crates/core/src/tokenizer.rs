//! Whitespace/punctuation tokenizer with a fixed special-token prefix.
//!
//! The six stage markers are first-class vocabulary entries. Token positions
//! handed to the rest of the crate use [`TokenRange`], which is 1-indexed and
//! inclusive on both ends.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthcorpus::{AnnotatedRecord, Stage};

pub const PAD: u32 = 0;
pub const EOT: u32 = 1;
pub const UNK: u32 = 2;

pub const SPECIALS: [&str; 9] = ["<pad>", "<eot>", "<unk>", "<p>", "</p>", "<l>", "</l>", "<r>", "</r>"];

/// Prompt used when scoring heads. `{Information}` is the annotated record,
/// `{Diagnosis}` the gold label.
pub const IDENTIFICATION_TEMPLATE: &str = "Patient information:{Information}\n\
Based on the above information, the patient is diagnosed with {Diagnosis}.\n\
Question: What are the key etiologies supporting this diagnosis?\n\
Answer:";

/// Appended to a record to ask for a diagnosis.
pub const DIAGNOSIS_SUFFIX: &str = "Diagnosis:";

pub fn open_marker_id(stage: Stage) -> u32 {
    3 + 2 * stage.index() as u32
}

pub fn close_marker_id(stage: Stage) -> u32 {
    4 + 2 * stage.index() as u32
}

fn marker_stage(id: u32) -> Option<(Stage, bool)> {
    Stage::ALL.into_iter().find_map(|s| {
        if id == open_marker_id(s) {
            Some((s, true))
        } else if id == close_marker_id(s) {
            Some((s, false))
        } else {
            None
        }
    })
}

/// Inclusive 1-indexed token interval `i..=j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenRange {
    start: usize,
    end: usize,
}

impl TokenRange {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start == 0 || start > end {
            return Err(Error::Definition(format!(
                "token range ({start}, {end}) violates 1 <= i <= j"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `pos` is 1-indexed.
    pub fn contains(&self, pos: usize) -> bool {
        (self.start..=self.end).contains(&pos)
    }

    pub fn shifted(&self, offset: usize) -> Self {
        Self {
            start: self.start + offset,
            end: self.end + offset,
        }
    }

    /// The same positions as a 0-based half-open range.
    pub fn zero_based(&self) -> Range<usize> {
        self.start - 1..self.end
    }
}

/// Splits on whitespace, breaks ASCII punctuation into single-character
/// tokens and keeps marker strings whole. Returns `(token, char_start,
/// char_end)`.
pub fn tokenize(text: &str) -> Vec<(String, usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let markers: Vec<Vec<char>> = SPECIALS[3..].iter().map(|m| m.chars().collect()).collect();
    let mut out = Vec::new();
    let mut i = 0;
    let mut word_start: Option<usize> = None;
    let flush = |out: &mut Vec<(String, usize, usize)>, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            out.push((chars[s..end].iter().collect(), s, end));
        }
    };
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            flush(&mut out, &mut word_start, i);
            i += 1;
            continue;
        }
        if let Some(m) = markers.iter().find(|m| chars[i..].starts_with(m)) {
            flush(&mut out, &mut word_start, i);
            out.push((m.iter().collect(), i, i + m.len()));
            i += m.len();
            continue;
        }
        if c.is_ascii_punctuation() {
            flush(&mut out, &mut word_start, i);
            out.push((c.to_string(), i, i + 1));
            i += 1;
            continue;
        }
        if word_start.is_none() {
            word_start = Some(i);
        }
        i += 1;
    }
    flush(&mut out, &mut word_start, chars.len());
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config(format!(
                "vocabulary must start with {SPECIALS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Hex SHA-256 of the vocabulary file contents.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.tokens).expect("strings serialize");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|(t, _, _)| self.id_or_unk(t)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(&self.tokens)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("vocabulary file: {e}")))?;
        Self::from_tokens(tokens)
    }
}

/// Specials first, then prompt literal tokens, then labels, then corpus
/// tokens seen at least `min_count` times, each group in first-seen order.
pub fn build_vocab(corpus: &[AnnotatedRecord], min_count: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut seen: HashMap<String, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();
    let mut add = |tokens: &mut Vec<String>, t: &str| {
        if seen.insert(t.to_string(), ()).is_none() {
            tokens.push(t.to_string());
        }
    };
    for text in [IDENTIFICATION_TEMPLATE, DIAGNOSIS_SUFFIX] {
        let filled = text.replace("{Information}", " ").replace("{Diagnosis}", " ");
        for (t, _, _) in tokenize(&filled) {
            add(&mut tokens, &t);
        }
    }
    for r in corpus {
        for (t, _, _) in tokenize(&r.base.label) {
            add(&mut tokens, &t);
        }
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    for r in corpus {
        for (t, _, _) in tokenize(&r.annotated_text) {
            let c = counts.entry(t.clone()).or_insert(0);
            if *c == 0 {
                order.push(t);
            }
            *c += 1;
        }
    }
    for t in order {
        if counts[&t] >= min_count.max(1) {
            add(&mut tokens, &t);
        }
    }
    Vocabulary::from_tokens(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedRecord {
    pub ids: Vec<u32>,
    pub stage_ranges: BTreeMap<Stage, Vec<TokenRange>>,
    /// 1-indexed positions of each open/close marker pair.
    pub marker_positions: BTreeMap<Stage, Vec<(usize, usize)>>,
    pub label_ids: Vec<u32>,
    /// Index into the record's segment list for every token; `None` for
    /// marker tokens.
    pub segment_of: Vec<Option<usize>>,
}

impl TokenizedRecord {
    pub fn has_ranges(&self) -> bool {
        self.stage_ranges.values().any(|v| !v.is_empty())
    }

    pub fn range_token_count(&self, stage: Stage) -> usize {
        self.stage_ranges
            .get(&stage)
            .map(|v| v.iter().map(TokenRange::len).sum())
            .unwrap_or(0)
    }
}

fn segment_alignment(record: &AnnotatedRecord, tokens: &[String]) -> Result<Vec<Option<usize>>> {
    let mut seg_tokens: Vec<(usize, String)> = Vec::new();
    for (i, seg) in record.base.segments.iter().enumerate() {
        for (t, _, _) in tokenize(seg.text()) {
            seg_tokens.push((i, t));
        }
    }
    let mut it = seg_tokens.into_iter();
    let mut out = Vec::with_capacity(tokens.len());
    for t in tokens {
        if SPECIALS[3..].contains(&t.as_str()) {
            out.push(None);
            continue;
        }
        match it.next() {
            Some((i, st)) if &st == t => out.push(Some(i)),
            _ => {
                return Err(Error::Encoding(format!(
                    "record {}: segments do not tokenize to the record text",
                    record.base.id
                )))
            }
        }
    }
    if it.next().is_some() {
        return Err(Error::Encoding(format!(
            "record {}: segments extend past the record text",
            record.base.id
        )));
    }
    Ok(out)
}

/// Encode the annotated text; stage ranges come from marker positions.
pub fn encode(record: &AnnotatedRecord, vocab: &Vocabulary) -> Result<TokenizedRecord> {
    let pieces = tokenize(&record.annotated_text);
    let ids: Vec<u32> = pieces.iter().map(|(t, _, _)| vocab.id_or_unk(t)).collect();
    let mut stage_ranges: BTreeMap<Stage, Vec<TokenRange>> = BTreeMap::new();
    let mut marker_positions: BTreeMap<Stage, Vec<(usize, usize)>> = BTreeMap::new();
    let mut open: Option<(Stage, usize)> = None;
    for (idx, &id) in ids.iter().enumerate() {
        let pos = idx + 1;
        match (marker_stage(id), open) {
            (Some((stage, true)), None) => open = Some((stage, pos)),
            (Some((stage, false)), Some((open_stage, open_pos))) if stage == open_stage => {
                if pos == open_pos + 1 {
                    return Err(Error::Encoding(format!(
                        "record {}: empty {stage} span at token {pos}",
                        record.base.id
                    )));
                }
                stage_ranges
                    .entry(stage)
                    .or_default()
                    .push(TokenRange::new(open_pos + 1, pos - 1)?);
                marker_positions.entry(stage).or_default().push((open_pos, pos));
                open = None;
            }
            (Some((stage, is_open)), _) => {
                return Err(Error::Encoding(format!(
                    "record {}: unbalanced {} marker for {stage} at token {pos}",
                    record.base.id,
                    if is_open { "open" } else { "close" }
                )))
            }
            (None, _) => {}
        }
    }
    if let Some((stage, pos)) = open {
        return Err(Error::Encoding(format!(
            "record {}: {stage} marker opened at token {pos} is never closed",
            record.base.id
        )));
    }
    let tokens: Vec<String> = pieces.into_iter().map(|(t, _, _)| t).collect();
    let segment_of = segment_alignment(record, &tokens)?;
    Ok(TokenizedRecord {
        ids,
        stage_ranges,
        marker_positions,
        label_ids: vocab.encode_text(&record.base.label),
        segment_of,
    })
}

/// Encode the unannotated text; stage ranges come from the character spans.
pub fn encode_plain(record: &AnnotatedRecord, vocab: &Vocabulary) -> Result<TokenizedRecord> {
    let pieces = tokenize(&record.base.text);
    let ids: Vec<u32> = pieces.iter().map(|(t, _, _)| vocab.id_or_unk(t)).collect();
    let mut stage_ranges: BTreeMap<Stage, Vec<TokenRange>> = BTreeMap::new();
    for (&stage, spans) in &record.base.spans {
        for &(s, e) in spans {
            let inside: Vec<usize> = pieces
                .iter()
                .enumerate()
                .filter(|(_, (_, ts, te))| *ts >= s && *te <= e)
                .map(|(i, _)| i + 1)
                .collect();
            if let (Some(&a), Some(&b)) = (inside.first(), inside.last()) {
                stage_ranges.entry(stage).or_default().push(TokenRange::new(a, b)?);
            }
        }
    }
    let tokens: Vec<String> = pieces.into_iter().map(|(t, _, _)| t).collect();
    let segment_of = segment_alignment(record, &tokens)?;
    Ok(TokenizedRecord {
        ids,
        stage_ranges,
        marker_positions: BTreeMap::new(),
        label_ids: vocab.encode_text(&record.base.label),
        segment_of,
    })
}

/// Single-space join of the tokens; specials render literally.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Result<String> {
    let words: Vec<&str> = ids
        .iter()
        .map(|&id| vocab.token(id).ok_or(Error::Decoding(id)))
        .collect::<Result<_>>()?;
    Ok(words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcorpus::{annotate, generate_corpus, Difficulty, RawRecord, ScaffoldSpec, Segment, SegmentKind};

    fn single(text: &str, spans: &[(Stage, (usize, usize))]) -> AnnotatedRecord {
        let mut map: BTreeMap<Stage, Vec<(usize, usize)>> = BTreeMap::new();
        for &(s, sp) in spans {
            map.entry(s).or_default().push(sp);
        }
        annotate(&RawRecord {
            id: "t".into(),
            text: text.into(),
            label: "veltritis".into(),
            spans: map,
            segments: vec![Segment(text.into(), SegmentKind::Filler)],
        })
        .unwrap()
    }

    fn corpus() -> Vec<AnnotatedRecord> {
        let spec = ScaffoldSpec::default_spec();
        generate_corpus(&spec, 20, 4, Difficulty::Consistent)
            .unwrap()
            .iter()
            .map(|r| annotate(r).unwrap())
            .collect()
    }

    #[test]
    fn tokenize_splits_punctuation_and_keeps_markers() {
        let toks: Vec<String> = tokenize("a,b <p> c:d </p></l>x").into_iter().map(|t| t.0).collect();
        assert_eq!(toks, ["a", ",", "b", "<p>", "c", ":", "d", "</p>", "</l>", "x"]);
    }

    #[test]
    fn vocab_of_tiny_corpus() {
        let v = build_vocab(&[single("a b a", &[])], 1).unwrap();
        assert_eq!(&v.tokens()[..9], SPECIALS);
        assert!(v.id("a").is_some() && v.id("b").is_some());
        assert_eq!(v.id("<p>"), Some(open_marker_id(Stage::Physical)));
        assert_eq!(v.id("</r>"), Some(close_marker_id(Stage::Radiology)));
        assert!(v.id("Diagnosis").is_some() && v.id("etiologies").is_some());
        assert_eq!(v, build_vocab(&[single("a b a", &[])], 1).unwrap());
    }

    #[test]
    fn min_count_drops_singletons() {
        let recs = [single("a b a c zed zed", &[])];
        let v = build_vocab(&recs, 2).unwrap();
        // frequency oracle: a=2, b=1, c=1, zed=2
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in "a b a c zed zed".split(' ') {
            *counts.entry(w).or_default() += 1;
        }
        for (w, n) in counts {
            assert_eq!(v.id(w).is_some(), n >= 2, "{w}");
        }
        assert_eq!(v.encode_text("b"), vec![UNK]);
    }

    #[test]
    fn vocab_is_dense_and_bijective() {
        let v = build_vocab(&corpus(), 1).unwrap();
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as u32));
        }
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn encode_positional_arithmetic() {
        let r = single("x RLQ pain y", &[(Stage::Physical, (2, 10))]);
        let v = build_vocab(std::slice::from_ref(&r), 1).unwrap();
        let t = encode(&r, &v).unwrap();
        assert_eq!(t.ids.len(), 6);
        assert_eq!(t.stage_ranges[&Stage::Physical], vec![TokenRange::new(3, 4).unwrap()]);
        assert_eq!(t.marker_positions[&Stage::Physical], vec![(2, 5)]);
        assert_eq!(t.segment_of, vec![Some(0), None, Some(0), Some(0), None, Some(0)]);
    }

    #[test]
    fn encode_without_markers() {
        let r = single("no markers here", &[]);
        let v = build_vocab(std::slice::from_ref(&r), 1).unwrap();
        assert!(encode(&r, &v).unwrap().stage_ranges.is_empty());
    }

    #[test]
    fn unbalanced_markers_rejected() {
        let v = build_vocab(&[single("x y", &[])], 1).unwrap();
        for text in ["x <p> y", "x </p> y", "<p> x </l>", "<p> <l> x </l> </p>", "<p> </p>"] {
            let mut r = single("x y", &[]);
            r.annotated_text = text.into();
            assert!(matches!(encode(&r, &v), Err(Error::Encoding(_))), "{text}");
        }
    }

    #[test]
    fn corpus_ranges_decode_to_span_text() {
        let recs = corpus();
        let v = build_vocab(&recs, 1).unwrap();
        for r in &recs {
            let t = encode(r, &v).unwrap();
            let chars: Vec<char> = r.base.text.chars().collect();
            for (stage, spans) in &r.base.spans {
                let ranges = &t.stage_ranges[stage];
                assert_eq!(ranges.len(), spans.len());
                for (range, &(s, e)) in ranges.iter().zip(spans) {
                    let text: String = chars[s..e].iter().collect();
                    assert_eq!(decode(&t.ids[range.zero_based()], &v).unwrap(), text);
                    for &(o, c) in &t.marker_positions[stage] {
                        assert!(!range.contains(o) && !range.contains(c));
                    }
                }
            }
            assert_eq!(decode(&t.ids, &v).unwrap(), r.annotated_text);
            let p = encode_plain(r, &v).unwrap();
            assert_eq!(decode(&p.ids, &v).unwrap(), r.base.text);
            for (stage, ranges) in &p.stage_ranges {
                let marked = &t.stage_ranges[stage];
                for (a, b) in ranges.iter().zip(marked) {
                    assert_eq!(p.ids[a.zero_based()], t.ids[b.zero_based()]);
                }
            }
        }
    }

    #[test]
    fn decode_edge_cases() {
        let v = build_vocab(&[single("a", &[])], 1).unwrap();
        assert_eq!(decode(&[], &v).unwrap(), "");
        assert_eq!(decode(&[UNK], &v).unwrap(), "<unk>");
        assert!(matches!(decode(&[9999], &v), Err(Error::Decoding(9999))));
        let ids = v.encode_text("a <p> a </p>");
        let once = decode(&ids, &v).unwrap();
        assert_eq!(decode(&v.encode_text(&once), &v).unwrap(), once);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = build_vocab(&corpus(), 1).unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    #[test]
    fn token_range_rules() {
        assert!(TokenRange::new(0, 2).is_err());
        assert!(TokenRange::new(3, 2).is_err());
        let r = TokenRange::new(2, 4).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r.zero_based(), 1..4);
        assert_eq!(r.shifted(3), TokenRange::new(5, 7).unwrap());
    }
}
