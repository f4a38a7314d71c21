//! Synthetic translation task, candidate generation, simulated rubric
//! annotation and hard-example selection.
//!
//! The toy "translation" maps a source token string through a fixed
//! substitution and then swaps adjacent pairs whose token sum is odd. Stored
//! references are optionally corrupted by a single edit, so imitation
//! training sees noisy supervision while evaluation always uses the gold
//! transform.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{derive_seed, map_ordered};
use crate::prefcore::{
    rubric_score, sort_preference_set, Candidate, Method, OracleMeta, PreferenceSet,
    PromptedExample, TokenSeq, RUBRIC_STEPS,
};
use crate::seqmodel::{beam_search, nucleus_sample, ModelParams};
use crate::tokens::{EOS, PROMPT_BASE};

/// First id of the content alphabet; ids below are reserved or prompt ids.
pub const CONTENT_BASE: u32 = PROMPT_BASE + 1;
pub const DEFAULT_BAND: (f64, f64) = (0.75, 0.85);
pub const BEAM_SIZE: usize = 4;
pub const NUCLEUS_SAMPLES: usize = 3;
pub const NUCLEUS_P: f64 = 0.9;
/// Generation bound for every decode, end-of-sequence id included.
pub const MAX_DECODE_LEN: usize = 24;

/// User-facing description of the toy task; the substitution map is drawn
/// from `task_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_rate: f64,
    pub task_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            vocab_size: 8,
            min_len: 2,
            max_len: 6,
            noise_rate: 0.2,
            task_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_rate: f64,
    /// `substitution[t - CONTENT_BASE]` is the image of content token `t`.
    pub substitution: Vec<u32>,
}

impl ToyTaskSpec {
    pub fn new(cfg: &TaskConfig) -> Result<Self> {
        if cfg.vocab_size < CONTENT_BASE as usize + 2 {
            return Err(Error::Argument(format!(
                "vocab size must be at least {}, got {}",
                CONTENT_BASE + 2,
                cfg.vocab_size
            )));
        }
        if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
            return Err(Error::Argument(format!(
                "length range [{}, {}] is empty or starts at 0",
                cfg.min_len, cfg.max_len
            )));
        }
        if !(0.0..=1.0).contains(&cfg.noise_rate) {
            return Err(Error::Argument(format!(
                "noise rate must be in [0, 1], got {}",
                cfg.noise_rate
            )));
        }
        let mut substitution: Vec<u32> = (CONTENT_BASE..cfg.vocab_size as u32).collect();
        substitution.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.task_seed));
        Ok(ToyTaskSpec {
            vocab_size: cfg.vocab_size,
            min_len: cfg.min_len,
            max_len: cfg.max_len,
            noise_rate: cfg.noise_rate,
            substitution,
        })
    }

    pub fn content_range(&self) -> std::ops::Range<u32> {
        CONTENT_BASE..self.vocab_size as u32
    }

    pub fn prompt_prefix(&self) -> TokenSeq {
        TokenSeq(vec![PROMPT_BASE])
    }

    fn substitute(&self, t: u32) -> u32 {
        self.substitution[(t - CONTENT_BASE) as usize]
    }

    fn unsubstitute(&self, t: u32) -> u32 {
        let i = self
            .substitution
            .iter()
            .position(|&s| s == t)
            .expect("substitution is a bijection");
        CONTENT_BASE + i as u32
    }

    /// Gold target content (no end-of-sequence id) for a source.
    pub fn gold_content(&self, source: &[u32]) -> Vec<u32> {
        let mut out: Vec<u32> = source.iter().map(|&t| self.substitute(t)).collect();
        swap_pairs(&mut out);
        out
    }

    /// Gold target with the trailing end-of-sequence id.
    pub fn gold(&self, source: &[u32]) -> TokenSeq {
        let mut out = self.gold_content(source);
        out.push(EOS);
        TokenSeq(out)
    }

    /// Recovers the source from an uncorrupted target.
    pub fn invert(&self, target: &TokenSeq) -> TokenSeq {
        let mut out = target.content().to_vec();
        swap_pairs(&mut out);
        TokenSeq(out.into_iter().map(|t| self.unsubstitute(t)).collect())
    }

    /// Applies one uniformly chosen edit (substitute, delete, insert) to the
    /// content of `target`, keeping the trailing end-of-sequence id.
    pub fn corrupt<R: Rng + ?Sized>(&self, target: &TokenSeq, rng: &mut R) -> TokenSeq {
        let mut content = target.content().to_vec();
        let range = self.content_range();
        let mut edit = rng.random_range(0..3);
        if edit == 1 && content.len() < 2 {
            edit = 0;
        }
        match edit {
            0 if !content.is_empty() => {
                let pos = rng.random_range(0..content.len());
                let old = content[pos];
                // Uniform over the other content tokens.
                let mut t = rng.random_range(range.start..range.end - 1);
                if t >= old {
                    t += 1;
                }
                content[pos] = t;
            }
            1 => {
                let pos = rng.random_range(0..content.len());
                content.remove(pos);
            }
            _ => {
                let pos = rng.random_range(0..=content.len());
                content.insert(pos, rng.random_range(range.clone()));
            }
        }
        content.push(EOS);
        TokenSeq(content)
    }
}

/// Swaps positions `(2i, 2i+1)` whenever their token sum is odd. The sum is
/// preserved by the swap, so the rule is its own inverse.
pub fn swap_pairs(tokens: &mut [u32]) {
    for pair in tokens.chunks_exact_mut(2) {
        if (pair[0] + pair[1]) % 2 == 1 {
            pair.swap(0, 1);
        }
    }
}

/// One parallel-corpus line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelRecord {
    pub source: TokenSeq,
    /// Stored (possibly corrupted) reference, with end-of-sequence id.
    pub reference: TokenSeq,
    pub gold: TokenSeq,
    pub corrupted: bool,
}

impl ParallelRecord {
    pub fn example(&self, prompt_prefix: &TokenSeq) -> PromptedExample {
        PromptedExample {
            source: self.source.clone(),
            target: self.reference.clone(),
            prompt_prefix: prompt_prefix.clone(),
        }
    }
}

pub fn gen_parallel_corpus<R: Rng + ?Sized>(
    task: &ToyTaskSpec,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ParallelRecord>> {
    if n == 0 {
        return Err(Error::Argument("corpus size must be at least 1".into()));
    }
    let range = task.content_range();
    Ok((0..n)
        .map(|_| {
            let len = rng.random_range(task.min_len..=task.max_len);
            let source: Vec<u32> = (0..len).map(|_| rng.random_range(range.clone())).collect();
            let gold = task.gold(&source);
            let corrupted = rng.random::<f64>() < task.noise_rate;
            let reference = if corrupted {
                task.corrupt(&gold, rng)
            } else {
                gold.clone()
            };
            ParallelRecord {
                source: TokenSeq(source),
                reference,
                gold,
                corrupted,
            }
        })
        .collect())
}

pub fn write_corpus(records: &[ParallelRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<ParallelRecord>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// `1 - lev(a, b) / max(|a|, |b|)` on content tokens (a trailing
/// end-of-sequence id is ignored). Two empty sequences score 1.
pub fn oracle_quality(candidate: &TokenSeq, gold: &TokenSeq) -> f64 {
    let (a, b) = (candidate.content(), gold.content());
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::generic_levenshtein(&a.to_vec(), &b.to_vec()) as f64 / longest as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorSpec {
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AnnotatorSpec {
    fn default() -> Self {
        AnnotatorSpec {
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

/// Two independent rubric scores for a candidate of the given quality:
/// `clamp(1 + 5q + noise, 1, 6)` snapped to the 0.2 grid, half to even.
pub fn simulate_annotation<R: Rng + ?Sized>(
    quality: f64,
    spec: &AnnotatorSpec,
    rng: &mut R,
) -> Result<[f64; 2]> {
    if !(0.0..=1.0).contains(&quality) {
        return Err(Error::Argument(format!("quality must be in [0, 1], got {quality}")));
    }
    if !(spec.noise_sigma >= 0.0) || !spec.noise_sigma.is_finite() {
        return Err(Error::Argument(format!(
            "annotator noise must be >= 0, got {}",
            spec.noise_sigma
        )));
    }
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut one = || {
        let eps = if spec.noise_sigma > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        };
        let raw = (1.0 + 5.0 * quality + eps).clamp(1.0, 6.0);
        let k = ((raw - 1.0) * 5.0).round_ties_even() as u32;
        rubric_score(k.min(RUBRIC_STEPS))
    };
    Ok([one(), one()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCandidate {
    pub tokens: TokenSeq,
    pub method: Method,
    /// No end-of-sequence id was produced within the decode bound.
    pub truncated: bool,
}

/// The stored reference, one beam-search output and three nucleus samples,
/// in that order. Duplicates are kept.
pub fn gen_candidates(
    params: &ModelParams,
    example: &PromptedExample,
    seed: u64,
) -> Result<Vec<GeneratedCandidate>> {
    let mut out = Vec::with_capacity(2 + NUCLEUS_SAMPLES);
    out.push(GeneratedCandidate {
        tokens: example.target.clone(),
        method: Method::Reference,
        truncated: false,
    });
    let beam = beam_search(params, example, BEAM_SIZE, MAX_DECODE_LEN)?;
    out.push(GeneratedCandidate {
        tokens: beam.tokens,
        method: Method::Beam,
        truncated: beam.truncated,
    });
    for k in 0..NUCLEUS_SAMPLES {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
        let d = nucleus_sample(params, example, NUCLEUS_P, &mut rng, MAX_DECODE_LEN)?;
        out.push(GeneratedCandidate {
            tokens: d.tokens,
            method: Method::Nucleus,
            truncated: d.truncated,
        });
    }
    Ok(out)
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Annotates generated candidates against the gold target, attaches oracle
/// statistics and sorts the set best-first.
pub fn annotate_set<R: Rng + ?Sized>(
    example: &PromptedExample,
    generated: Vec<GeneratedCandidate>,
    gold: &TokenSeq,
    annotator: &AnnotatorSpec,
    rng: &mut R,
) -> Result<PreferenceSet> {
    let qualities: Vec<f64> = generated
        .iter()
        .map(|g| oracle_quality(&g.tokens, gold))
        .collect();
    let model_q: Vec<f64> = generated
        .iter()
        .zip(&qualities)
        .filter(|(g, _)| g.method != Method::Reference)
        .map(|(_, &q)| q)
        .collect();
    let beam_quality = generated
        .iter()
        .zip(&qualities)
        .find(|(g, _)| g.method == Method::Beam)
        .map(|(_, &q)| q)
        .unwrap_or(0.0);
    let mut candidates = Vec::with_capacity(generated.len());
    for (g, q) in generated.into_iter().zip(qualities) {
        let scores = simulate_annotation(q, annotator, rng)?;
        candidates.push(Candidate::scored(g.tokens, g.method, scores)?);
    }
    sort_preference_set(PreferenceSet {
        example: example.clone(),
        candidates,
        oracle: Some(OracleMeta {
            beam_quality,
            quality_stddev: std_dev(&model_q),
        }),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub sets: usize,
    pub truncated_candidates: usize,
    /// Sets where a model candidate outscores the reference.
    pub reference_beaten: usize,
}

/// Builds one annotated preference set per record. Each source gets its own
/// seed stream, so results do not depend on `workers`.
pub fn gen_preference_sets(
    params: &ModelParams,
    records: &[ParallelRecord],
    prompt_prefix: &TokenSeq,
    annotator: &AnnotatorSpec,
    seed: u64,
    workers: usize,
) -> Result<(Vec<PreferenceSet>, GenStats)> {
    let results = map_ordered(workers, records, |i, rec| -> Result<(PreferenceSet, usize)> {
        let example = rec.example(prompt_prefix);
        let gen = gen_candidates(params, &example, derive_seed(seed, i as u64))?;
        let truncated = gen.iter().filter(|g| g.truncated).count();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(annotator.seed, i as u64));
        let set = annotate_set(&example, gen, &rec.gold, annotator, &mut rng)?;
        Ok((set, truncated))
    });
    let mut stats = GenStats::default();
    let mut sets = Vec::with_capacity(records.len());
    for r in results {
        let (set, truncated) = r?;
        stats.sets += 1;
        stats.truncated_candidates += truncated;
        if set.candidates[0].method != Method::Reference {
            stats.reference_beaten += 1;
        }
        sets.push(set);
    }
    Ok((sets, stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub sets: Vec<PreferenceSet>,
    /// Pool positions of the selected sets, in output order.
    pub indices: Vec<usize>,
    /// Fewer than `k` sets fell inside the band; the rest were filled from
    /// outside it.
    pub shortfall: bool,
}

/// Keeps sets whose beam quality lies in `band`, highest quality spread
/// first; tops up from outside the band when fewer than `k` qualify.
pub fn select_hard_examples(pool: &[PreferenceSet], band: (f64, f64), k: usize) -> Result<Selection> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for (i, set) in pool.iter().enumerate() {
        let meta = set.oracle.ok_or_else(|| {
            Error::Validation(format!("preference set {i} has no oracle metadata"))
        })?;
        if (band.0..=band.1).contains(&meta.beam_quality) {
            inside.push((i, meta.quality_stddev));
        } else {
            outside.push((i, meta.quality_stddev));
        }
    }
    let by_spread = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    inside.sort_by(by_spread);
    outside.sort_by(by_spread);
    let shortfall = inside.len() < k;
    let indices: Vec<usize> = inside
        .into_iter()
        .chain(outside)
        .take(k)
        .map(|(i, _)| i)
        .collect();
    Ok(Selection {
        sets: indices.iter().map(|&i| pool[i].clone()).collect(),
        indices,
        shortfall,
    })
}
