//! Core data model: token sequences, scored candidates, preference sets and
//! datasets, plus the line-delimited JSON format they are stored in.
//!
//! A preference set holds one source with 2 to 5 candidate outputs sorted
//! best-first by their rubric score. Rubric scores come from two simulated
//! annotators who each score on the grid {1.0, 1.2, ..., 6.0}; the candidate
//! score is their mean and is not re-quantized.

use std::cmp::Ordering;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "pld-prefs";
pub const FORMAT_VERSION: u32 = 1;

pub const RUBRIC_MIN: f64 = 1.0;
pub const RUBRIC_MAX: f64 = 6.0;
/// Number of 0.2 steps between the rubric bounds.
pub const RUBRIC_STEPS: u32 = 25;
pub const MIN_CANDIDATES: usize = 2;
pub const MAX_CANDIDATES: usize = 5;

const GRID_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        TokenSeq(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    /// First id that is not below `vocab_size`, if any.
    pub fn out_of_vocab(&self, vocab_size: usize) -> Option<u32> {
        self.0.iter().copied().find(|&t| t as usize >= vocab_size)
    }

    /// The tokens with one trailing end-of-sequence marker removed.
    pub fn content(&self) -> &[u32] {
        match self.0.split_last() {
            Some((&last, rest)) if last == crate::tokens::EOS => rest,
            _ => &self.0,
        }
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        TokenSeq(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptedExample {
    pub source: TokenSeq,
    pub target: TokenSeq,
    pub prompt_prefix: TokenSeq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Reference,
    Beam,
    Nucleus,
}

impl Method {
    /// Tie-break priority when scores are equal; lower sorts first.
    pub fn priority(self) -> u8 {
        match self {
            Method::Reference => 0,
            Method::Beam => 1,
            Method::Nucleus => 2,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Reference => "reference",
            Method::Beam => "beam",
            Method::Nucleus => "nucleus",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: TokenSeq,
    pub method: Method,
    pub annotator_scores: [f64; 2],
    pub score: f64,
}

impl Candidate {
    /// Builds a candidate, checking both annotator scores and averaging them.
    pub fn scored(tokens: TokenSeq, method: Method, annotator_scores: [f64; 2]) -> Result<Self> {
        let score = average_annotators(annotator_scores[0], annotator_scores[1])?;
        Ok(Candidate {
            tokens,
            method,
            annotator_scores,
            score,
        })
    }
}

/// Oracle statistics attached to a set during hard-example selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleMeta {
    pub beam_quality: f64,
    pub quality_stddev: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceSet {
    pub example: PromptedExample,
    pub candidates: Vec<Candidate>,
    pub oracle: Option<OracleMeta>,
}

impl PreferenceSet {
    pub fn scores(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.score).collect()
    }

    pub fn is_sorted(&self) -> bool {
        self.candidates.windows(2).all(|w| w[0].score >= w[1].score)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDataset {
    pub sets: Vec<PreferenceSet>,
    pub vocab_size: usize,
    /// Task seed and generation parameters.
    pub metadata: Map<String, Value>,
}

/// Grid index `k` of a rubric score `1 + 0.2 k`, or a validation error.
pub fn rubric_index(score: f64) -> Result<u32> {
    if !score.is_finite() || !(RUBRIC_MIN - GRID_TOL..=RUBRIC_MAX + GRID_TOL).contains(&score) {
        return Err(Error::Validation(format!(
            "rubric score {score} outside [{RUBRIC_MIN}, {RUBRIC_MAX}]"
        )));
    }
    let k = ((score - RUBRIC_MIN) * 5.0).round();
    if (score - rubric_score(k as u32)).abs() > GRID_TOL {
        return Err(Error::Validation(format!(
            "rubric score {score} is not a multiple of 0.2"
        )));
    }
    Ok(k as u32)
}

/// Rubric score for grid index `k`, computed as `(5 + k) / 5` so that grid
/// values are the nearest doubles to their decimal form.
pub fn rubric_score(k: u32) -> f64 {
    (5 + k) as f64 / 5.0
}

/// Mean of two annotator scores. Both must lie on the 0.2 grid in [1, 6].
pub fn average_annotators(a: f64, b: f64) -> Result<f64> {
    let ka = rubric_index(a)?;
    let kb = rubric_index(b)?;
    Ok((10 + ka + kb) as f64 / 10.0)
}

/// Order that sorts candidates best-first: score descending, then method
/// priority (reference, beam, nucleus), then original position.
pub fn preference_order(candidates: &[Candidate]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&i, &j| {
        let (a, b) = (&candidates[i], &candidates[j]);
        b.score
            .total_cmp(&a.score)
            .then(a.method.priority().cmp(&b.method.priority()))
            .then(i.cmp(&j))
    });
    idx
}

pub fn sort_preference_set(set: PreferenceSet) -> Result<PreferenceSet> {
    if set.candidates.len() < MIN_CANDIDATES {
        return Err(Error::Validation(format!(
            "preference set needs at least {MIN_CANDIDATES} candidates, got {}",
            set.candidates.len()
        )));
    }
    if let Some(c) = set.candidates.iter().find(|c| !c.score.is_finite()) {
        return Err(Error::Validation(format!("non-finite score {}", c.score)));
    }
    let order = preference_order(&set.candidates);
    let mut slots: Vec<Option<Candidate>> = set.candidates.into_iter().map(Some).collect();
    let candidates = order
        .into_iter()
        .map(|i| slots[i].take().expect("permutation"))
        .collect();
    Ok(PreferenceSet {
        example: set.example,
        candidates,
        oracle: set.oracle,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub record: usize,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record {}: {}: {}", self.record, self.field, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, record: usize, field: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            record,
            field: field.into(),
            message: message.into(),
        });
    }
}

/// Checks every record against the data-model invariants. Violations are
/// collected, never raised.
pub fn validate_dataset(ds: &PreferenceDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let v = ds.vocab_size;
    let shared_prefix = ds.sets.first().map(|s| &s.example.prompt_prefix);

    for (r, set) in ds.sets.iter().enumerate() {
        let ex = &set.example;
        for (field, seq) in [
            ("source", &ex.source),
            ("target", &ex.target),
            ("prompt_prefix", &ex.prompt_prefix),
        ] {
            if let Some(t) = seq.out_of_vocab(v) {
                report.push(r, field, format!("token id {t} >= vocab size {v}"));
            }
        }
        if ex.source.is_empty() {
            report.push(r, "source", "empty sequence");
        }
        if Some(&ex.prompt_prefix) != shared_prefix {
            report.push(r, "prompt_prefix", "differs from the dataset's prompt prefix");
        }

        let n = set.candidates.len();
        if !(MIN_CANDIDATES..=MAX_CANDIDATES).contains(&n) {
            report.push(
                r,
                "candidates",
                format!("{n} candidates, expected {MIN_CANDIDATES}..={MAX_CANDIDATES}"),
            );
        }
        let references = set
            .candidates
            .iter()
            .filter(|c| c.method == Method::Reference)
            .count();
        if references > 1 {
            report.push(r, "candidates", format!("{references} reference candidates"));
        }

        for (c, cand) in set.candidates.iter().enumerate() {
            let field = |f: &str| format!("candidates[{c}].{f}");
            if cand.tokens.is_empty() {
                report.push(r, field("tokens"), "empty sequence");
            }
            if let Some(t) = cand.tokens.out_of_vocab(v) {
                report.push(r, field("tokens"), format!("token id {t} >= vocab size {v}"));
            }
            let mut grid_ok = true;
            for (a, &s) in cand.annotator_scores.iter().enumerate() {
                if let Err(e) = rubric_index(s) {
                    grid_ok = false;
                    report.push(r, field(&format!("annotator_scores[{a}]")), e.to_string());
                }
            }
            if !cand.score.is_finite() || !(RUBRIC_MIN..=RUBRIC_MAX).contains(&cand.score) {
                report.push(
                    r,
                    field("score"),
                    format!("score {} outside [{RUBRIC_MIN}, {RUBRIC_MAX}]", cand.score),
                );
            } else if grid_ok {
                let mean = average_annotators(cand.annotator_scores[0], cand.annotator_scores[1])
                    .expect("checked above");
                if (mean - cand.score).abs() > GRID_TOL {
                    report.push(
                        r,
                        field("score"),
                        format!("score {} is not the annotator mean {mean}", cand.score),
                    );
                }
            }
        }

        if let Some(i) = set
            .candidates
            .windows(2)
            .position(|w| w[0].score.partial_cmp(&w[1].score) == Some(Ordering::Less))
        {
            report.push(
                r,
                "candidates",
                format!("not sorted by score: position {} ranks below {}", i, i + 1),
            );
        }
    }
    report
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    vocab_size: usize,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    metadata: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct SetRecord {
    source: TokenSeq,
    prompt_prefix: TokenSeq,
    candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beam_quality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quality_stddev: Option<f64>,
}

impl From<&PreferenceSet> for SetRecord {
    fn from(set: &PreferenceSet) -> Self {
        SetRecord {
            source: set.example.source.clone(),
            prompt_prefix: set.example.prompt_prefix.clone(),
            candidates: set.candidates.clone(),
            beam_quality: set.oracle.map(|o| o.beam_quality),
            quality_stddev: set.oracle.map(|o| o.quality_stddev),
        }
    }
}

impl SetRecord {
    fn into_set(self) -> PreferenceSet {
        // The stored example target is the reference candidate when present.
        let target = self
            .candidates
            .iter()
            .find(|c| c.method == Method::Reference)
            .or(self.candidates.first())
            .map(|c| c.tokens.clone())
            .unwrap_or_default();
        let oracle = match (self.beam_quality, self.quality_stddev) {
            (Some(beam_quality), Some(quality_stddev)) => Some(OracleMeta {
                beam_quality,
                quality_stddev,
            }),
            _ => None,
        };
        PreferenceSet {
            example: PromptedExample {
                source: self.source,
                target,
                prompt_prefix: self.prompt_prefix,
            },
            candidates: self.candidates,
            oracle,
        }
    }
}

impl PreferenceDataset {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            vocab_size: self.vocab_size,
            metadata: self.metadata.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for set in &self.sets {
            serde_json::to_writer(&mut w, &SetRecord::from(set))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Parses the line-delimited format. `origin` names the source in errors.
    pub fn read_jsonl<R: BufRead>(r: R, origin: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = r.lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, line)) => {
                serde_json::from_str(&line?).map_err(|e| parse_err(1, e.to_string()))?
            }
            None => return Err(parse_err(1, "missing header line".into())),
        };
        if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
            return Err(parse_err(
                1,
                format!(
                    "expected format {FORMAT_NAME} v{FORMAT_VERSION}, found {} v{}",
                    header.format, header.version
                ),
            ));
        }
        let mut sets = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SetRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            sets.push(rec.into_set());
        }
        Ok(PreferenceDataset {
            sets,
            vocab_size: header.vocab_size,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f), path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(method: Method, a: f64, b: f64) -> Candidate {
        Candidate::scored(TokenSeq(vec![5, 6, 1]), method, [a, b]).unwrap()
    }

    fn set_with(cands: Vec<Candidate>) -> PreferenceSet {
        PreferenceSet {
            example: PromptedExample {
                source: TokenSeq(vec![7, 8]),
                target: TokenSeq(vec![5, 6, 1]),
                prompt_prefix: TokenSeq(vec![3, 4]),
            },
            candidates: cands,
            oracle: None,
        }
    }

    #[test]
    fn averages_annotators() {
        assert_eq!(average_annotators(6.0, 6.0).unwrap(), 6.0);
        assert_eq!(average_annotators(1.0, 6.0).unwrap(), 3.5);
        assert_eq!(average_annotators(3.4, 3.8).unwrap(), 3.6);
        // Off-grid means are allowed.
        assert_eq!(average_annotators(1.0, 1.2).unwrap(), 1.1);
    }

    #[test]
    fn rejects_bad_rubric_scores() {
        let e = average_annotators(6.1, 5.0).unwrap_err().to_string();
        assert!(e.contains("6.1"), "{e}");
        let e = average_annotators(3.0, 3.3).unwrap_err().to_string();
        assert!(e.contains("3.3"), "{e}");
        assert!(average_annotators(0.8, 3.0).is_err());
        assert!(average_annotators(f64::NAN, 3.0).is_err());
    }

    #[test]
    fn grid_values_are_exact_decimals() {
        for k in 0..=RUBRIC_STEPS {
            let s = rubric_score(k);
            assert_eq!(rubric_index(s).unwrap(), k);
            let text = format!("{s}");
            assert!(text.len() <= 3, "{text}");
        }
    }

    #[test]
    fn sorts_by_score() {
        let set = set_with(vec![
            cand(Method::Reference, 3.0, 3.0),
            cand(Method::Beam, 5.0, 5.0),
            cand(Method::Nucleus, 4.0, 4.0),
        ]);
        assert_eq!(preference_order(&set.candidates), vec![1, 2, 0]);
        let sorted = sort_preference_set(set).unwrap();
        assert_eq!(sorted.scores(), vec![5.0, 4.0, 3.0]);
    }

    #[test]
    fn ties_break_on_method() {
        let set = set_with(vec![
            cand(Method::Nucleus, 4.0, 4.0),
            cand(Method::Reference, 4.0, 4.0),
        ]);
        assert_eq!(preference_order(&set.candidates), vec![1, 0]);
    }

    #[test]
    fn ties_within_method_keep_input_order() {
        let mut a = cand(Method::Nucleus, 4.0, 4.0);
        a.tokens = TokenSeq(vec![9, 1]);
        let b = cand(Method::Nucleus, 4.0, 4.0);
        let set = set_with(vec![a.clone(), b.clone()]);
        let sorted = sort_preference_set(set).unwrap();
        assert_eq!(sorted.candidates, vec![a, b]);
    }

    #[test]
    fn sort_needs_two_candidates() {
        let set = set_with(vec![cand(Method::Beam, 4.0, 4.0)]);
        assert!(matches!(sort_preference_set(set), Err(Error::Validation(_))));
    }

    fn dataset(sets: Vec<PreferenceSet>) -> PreferenceDataset {
        PreferenceDataset {
            sets,
            vocab_size: 16,
            metadata: Map::new(),
        }
    }

    #[test]
    fn well_formed_dataset_validates() {
        let s1 = set_with(vec![
            cand(Method::Reference, 5.0, 5.4),
            cand(Method::Beam, 4.0, 4.2),
        ]);
        let s2 = set_with(vec![
            cand(Method::Beam, 6.0, 6.0),
            cand(Method::Nucleus, 2.0, 1.0),
        ]);
        assert!(validate_dataset(&dataset(vec![s1, s2])).is_empty());
    }

    #[test]
    fn validation_names_bad_score() {
        let mut c = cand(Method::Reference, 5.0, 5.0);
        c.score = 6.1;
        let s1 = set_with(vec![cand(Method::Beam, 6.0, 6.0), cand(Method::Beam, 5.0, 5.0)]);
        let s2 = set_with(vec![c, cand(Method::Beam, 5.0, 5.0)]);
        let report = validate_dataset(&dataset(vec![s1, s2]));
        assert_eq!(report.violations.len(), 1, "{:?}", report);
        let v = &report.violations[0];
        assert_eq!(v.record, 1);
        assert_eq!(v.field, "candidates[0].score");
        assert!(v.message.contains("6.1"));
    }

    #[test]
    fn validation_cites_sort_order() {
        let s = set_with(vec![cand(Method::Beam, 3.0, 3.0), cand(Method::Beam, 5.0, 5.0)]);
        let report = validate_dataset(&dataset(vec![s]));
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].message.contains("not sorted"));
    }

    #[test]
    fn validation_catches_vocab_and_prefix() {
        let s1 = set_with(vec![cand(Method::Beam, 6.0, 6.0), cand(Method::Beam, 5.0, 5.0)]);
        let mut s2 = s1.clone();
        s2.example.prompt_prefix = TokenSeq(vec![3]);
        s2.candidates[1].tokens = TokenSeq(vec![40]);
        let report = validate_dataset(&dataset(vec![s1, s2]));
        let fields: Vec<_> = report.violations.iter().map(|v| v.field.as_str()).collect();
        assert_eq!(fields, vec!["prompt_prefix", "candidates[1].tokens"]);
    }

    #[test]
    fn jsonl_header_and_round_trip() {
        let mut s = set_with(vec![
            cand(Method::Reference, 5.0, 5.4),
            cand(Method::Nucleus, 4.0, 4.2),
        ]);
        s.oracle = Some(OracleMeta {
            beam_quality: 0.8,
            quality_stddev: 0.1,
        });
        let ds = dataset(vec![s]);
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first, r#"{"format":"pld-prefs","version":1,"vocab_size":16}"#);
        assert!(text.contains(r#""method":"reference""#));
        let back = PreferenceDataset::read_jsonl(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn jsonl_rejects_wrong_header() {
        let text = "{\"format\":\"other\",\"version\":1,\"vocab_size\":4}\n";
        let err = PreferenceDataset::read_jsonl(text.as_bytes(), Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
