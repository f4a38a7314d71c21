//! Evaluation: oracle corpus quality, corpus BLEU, calibration
//! correlations, K-selection, data-size plateau curves and the ablation
//! table.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{oracle_quality, ParallelRecord, BEAM_SIZE, MAX_DECODE_LEN};
use crate::error::{Error, Result};
use crate::parallel::map_ordered;
use crate::prefcore::{PreferenceDataset, PreferenceSet, TokenSeq, MAX_CANDIDATES};
use crate::seqmodel::{beam_search, sequence_logprob, ModelParams};
use crate::trainer::{run_pl, run_sft, AblationRow, TrainConfig};

/// Beam-decodes every source (beam 4) and returns the outputs in order.
pub fn decode_corpus(
    params: &ModelParams,
    records: &[ParallelRecord],
    prompt_prefix: &TokenSeq,
    workers: usize,
) -> Result<Vec<TokenSeq>> {
    map_ordered(workers, records, |_, r| {
        beam_search(params, &r.example(prompt_prefix), BEAM_SIZE, MAX_DECODE_LEN).map(|d| d.tokens)
    })
    .into_iter()
    .collect()
}

/// Mean oracle quality of beam-4 outputs against the gold targets.
pub fn corpus_quality(
    params: &ModelParams,
    records: &[ParallelRecord],
    prompt_prefix: &TokenSeq,
    workers: usize,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Argument("test set is empty".into()));
    }
    let outputs = decode_corpus(params, records, prompt_prefix, workers)?;
    Ok(mean_quality(&outputs, records))
}

pub fn mean_quality(outputs: &[TokenSeq], records: &[ParallelRecord]) -> f64 {
    let total: f64 = outputs
        .iter()
        .zip(records)
        .map(|(o, r)| oracle_quality(o, &r.gold))
        .sum();
    total / records.len() as f64
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU over n = 1..4 with clipped counts, add-one smoothing of
/// orders with no matches, and the brevity penalty. Trailing
/// end-of-sequence ids are ignored.
pub fn ngram_bleu(candidates: &[TokenSeq], references: &[TokenSeq]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Argument(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(|r| r.content().is_empty()) {
        return Err(Error::Argument(format!("reference {i} is empty")));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (c.content(), r.content());
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| {
            if matches[i] > 0 {
                (matches[i] as f64 / totals[i] as f64).ln()
            } else {
                (1.0 / (totals[i] as f64 + 1.0)).ln()
            }
        })
        .sum::<f64>()
        / 4.0;
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

fn all_equal(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// Pearson correlation, or `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 || all_equal(x) || all_equal(y) {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Kendall tau-b (tie-corrected), or `None` when either input is constant.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            if dx == 0 {
                tie_x += 1;
            }
            if dy == 0 {
                tie_y += 1;
            }
            match dx * dy {
                1 => concordant += 1,
                -1 => discordant += 1,
                _ => {}
            }
        }
    }
    let n0 = (x.len() * (x.len() - 1) / 2) as i64;
    let denom = ((n0 - tie_x) as f64 * (n0 - tie_y) as f64).sqrt();
    if denom == 0.0 {
        return None;
    }
    Some(((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// Mean per-set Pearson correlation over sets where it is defined.
    pub pearson: Option<f64>,
    pub kendall_tau_b: Option<f64>,
    pub defined_pearson: usize,
    pub defined_tau: usize,
    /// Sets with constant scores or constant log-likelihoods.
    pub undefined_sets: usize,
    /// Number of (score, log-likelihood) pairs in each set.
    pub pair_counts: Vec<usize>,
}

impl CalibrationReport {
    /// Averages per-set correlations, dropping undefined sets.
    pub fn from_pairs(sets: &[(Vec<f64>, Vec<f64>)]) -> Self {
        let (mut ps, mut ts) = (Vec::new(), Vec::new());
        let mut undefined = 0;
        for (scores, lls) in sets {
            let p = pearson(scores, lls);
            let t = kendall_tau_b(scores, lls);
            if p.is_none() || t.is_none() {
                undefined += 1;
            }
            ps.extend(p);
            ts.extend(t);
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        CalibrationReport {
            pearson: mean(&ps),
            kendall_tau_b: mean(&ts),
            defined_pearson: ps.len(),
            defined_tau: ts.len(),
            undefined_sets: undefined,
            pair_counts: sets.iter().map(|s| s.0.len()).collect(),
        }
    }
}

/// Per-set correlation between annotator scores and the model's sequence
/// log-likelihoods.
pub fn calibration(
    params: &ModelParams,
    sets: &[PreferenceSet],
    workers: usize,
) -> Result<CalibrationReport> {
    if let Some(i) = sets.iter().position(|s| s.candidates.len() < 2) {
        return Err(Error::Validation(format!("preference set {i} has fewer than 2 candidates")));
    }
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = map_ordered(workers, sets, |_, s| {
        let lls = s
            .candidates
            .iter()
            .map(|c| sequence_logprob(params, &s.example, &c.tokens).map(|(ll, _)| ll))
            .collect::<Result<Vec<f64>>>()?;
        Ok((s.scores(), lls))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(CalibrationReport::from_pairs(&pairs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KMode {
    Forward,
    Reverse,
}

impl std::str::FromStr for KMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(KMode::Forward),
            "reverse" => Ok(KMode::Reverse),
            _ => Err(Error::Argument(format!(
                "unknown selection mode {s:?} (expected forward or reverse)"
            ))),
        }
    }
}

/// Zero-based ranks kept by a K-selection mode on a set of 5.
pub fn k_selection_ranks(mode: KMode, k: usize) -> Result<Vec<usize>> {
    if !(2..=MAX_CANDIDATES).contains(&k) {
        return Err(Error::Argument(format!("K must be in [2, {MAX_CANDIDATES}], got {k}")));
    }
    Ok(match mode {
        KMode::Forward => (0..k).collect(),
        KMode::Reverse => std::iter::once(0)
            .chain(MAX_CANDIDATES - (k - 1)..MAX_CANDIDATES)
            .collect(),
    })
}

/// Keeps the top K candidates (forward) or the best plus the worst K-1
/// (reverse) of every sorted set of 5.
pub fn k_selection(ds: &PreferenceDataset, mode: KMode, k: usize) -> Result<PreferenceDataset> {
    let ranks = k_selection_ranks(mode, k)?;
    let mut sets = Vec::with_capacity(ds.sets.len());
    for (i, s) in ds.sets.iter().enumerate() {
        if s.candidates.len() != MAX_CANDIDATES || !s.is_sorted() {
            return Err(Error::Validation(format!(
                "preference set {i} must hold {MAX_CANDIDATES} sorted candidates"
            )));
        }
        sets.push(PreferenceSet {
            example: s.example.clone(),
            candidates: ranks.iter().map(|&r| s.candidates[r].clone()).collect(),
            oracle: s.oracle,
        });
    }
    Ok(PreferenceDataset {
        sets,
        vocab_size: ds.vocab_size,
        metadata: ds.metadata.clone(),
    })
}

/// Metric values over an x axis for several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCurve {
    pub series: String,
    pub x: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `values[i][s]` is the metric at `x[i]` for `seeds[s]`.
    pub values: Vec<Vec<f64>>,
}

pub const CURVE_TSV_HEADER: &str = "series\tx\tseed\tvalue";

impl ExperimentCurve {
    pub fn mean(&self) -> Vec<f64> {
        self.values.iter().map(|v| mean(v)).collect()
    }

    /// Rows without the header: one per (x, seed), then a mean row per x.
    pub fn tsv_rows(&self) -> String {
        let mut out = String::new();
        for (x, vals) in self.x.iter().zip(&self.values) {
            for (seed, v) in self.seeds.iter().zip(vals) {
                let _ = writeln!(out, "{}\t{x}\t{seed}\t{v}", self.series);
            }
        }
        for (x, m) in self.x.iter().zip(self.mean()) {
            let _ = writeln!(out, "{}\t{x}\tmean\t{m}", self.series);
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        format!("{CURVE_TSV_HEADER}\n{}", self.tsv_rows())
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Everything one seed's experiments need. Different seeds may share a
/// base model or bring their own.
#[derive(Clone, Copy, Debug)]
pub struct SeedContext<'a> {
    pub seed: u64,
    pub base: &'a ModelParams,
    pub pl_sets: &'a [PreferenceSet],
    pub test: &'a [ParallelRecord],
    pub heldout: &'a [PreferenceSet],
    pub prompt_prefix: &'a TokenSeq,
}

/// Continued imitation training on growing prefixes of `extra_pools[s]`
/// against a PL-trained reference. Fractions must be ascending in (0, 1].
/// Returns the SFT curve and the flat PL series.
pub fn plateau_experiment(
    contexts: &[SeedContext],
    extra_pools: &[&[ParallelRecord]],
    fractions: &[f64],
    sft_cfg: &TrainConfig,
    pl_cfg: &TrainConfig,
    workers: usize,
) -> Result<(ExperimentCurve, ExperimentCurve)> {
    if fractions.is_empty()
        || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0))
        || fractions.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::Argument(format!(
            "fractions must be ascending in (0, 1], got {fractions:?}"
        )));
    }
    if extra_pools.len() != contexts.len() {
        return Err(Error::Argument("one extra pool per seed is required".into()));
    }
    let per_seed = map_ordered(workers, contexts, |s, ctx| -> Result<(Vec<f64>, f64)> {
        let pool = extra_pools[s];
        let mut sft_vals = Vec::with_capacity(fractions.len());
        for &f in fractions {
            let n = (f * pool.len() as f64).round() as usize;
            let params = if n == 0 {
                ctx.base.clone()
            } else {
                let data: Vec<_> = pool[..n].iter().map(|r| r.example(ctx.prompt_prefix)).collect();
                let cfg = TrainConfig {
                    seed: ctx.seed,
                    workers: 1,
                    ..sft_cfg.clone()
                };
                run_sft(ctx.base, &data, &cfg)?.params
            };
            sft_vals.push(corpus_quality(&params, ctx.test, ctx.prompt_prefix, 1)?);
        }
        let cfg = TrainConfig {
            seed: ctx.seed,
            workers: 1,
            ..pl_cfg.clone()
        };
        let pl = run_pl(ctx.base, ctx.pl_sets, &cfg)?.params;
        Ok((sft_vals, corpus_quality(&pl, ctx.test, ctx.prompt_prefix, 1)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let seeds: Vec<u64> = contexts.iter().map(|c| c.seed).collect();
    let sft = ExperimentCurve {
        series: "continued_sft".into(),
        x: fractions.to_vec(),
        seeds: seeds.clone(),
        values: (0..fractions.len())
            .map(|i| per_seed.iter().map(|(v, _)| v[i]).collect())
            .collect(),
    };
    let pl_row: Vec<f64> = per_seed.iter().map(|(_, p)| *p).collect();
    let pl = ExperimentCurve {
        series: "pl".into(),
        x: fractions.to_vec(),
        seeds,
        values: vec![pl_row; fractions.len()],
    };
    Ok((sft, pl))
}

/// Corpus quality and calibration of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub corpus_quality: f64,
    pub calibration: CalibrationReport,
}

impl ModelScores {
    pub fn evaluate(params: &ModelParams, ctx: &SeedContext, workers: usize) -> Result<Self> {
        Ok(ModelScores {
            corpus_quality: corpus_quality(params, ctx.test, ctx.prompt_prefix, workers)?,
            calibration: calibration(params, ctx.heldout, workers)?,
        })
    }

    /// Calibration Pearson, NaN when no set had a defined value.
    pub fn pearson(&self) -> f64 {
        self.calibration.pearson.unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub row: AblationRow,
    pub seed: u64,
    pub scores: ModelScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub entries: Vec<AblationEntry>,
}

pub const ABLATION_TSV_HEADER: &str = "config\tseed\tcorpus_quality\tcalibration_pearson\tcalibration_kendall";

impl AblationReport {
    pub fn rows(&self, row: AblationRow) -> impl Iterator<Item = &AblationEntry> {
        self.entries.iter().filter(move |e| e.row == row)
    }

    /// Mean (corpus quality, calibration Pearson) over seeds.
    pub fn mean(&self, row: AblationRow) -> (f64, f64) {
        let q: Vec<f64> = self.rows(row).map(|e| e.scores.corpus_quality).collect();
        let c: Vec<f64> = self.rows(row).map(|e| e.scores.pearson()).collect();
        (mean(&q), mean(&c))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{ABLATION_TSV_HEADER}\n");
        let fmt = |x: Option<f64>| x.map_or("nan".to_string(), |v| v.to_string());
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                e.row.name(),
                e.seed,
                e.scores.corpus_quality,
                fmt(e.scores.calibration.pearson),
                fmt(e.scores.calibration.kendall_tau_b)
            );
        }
        for row in AblationRow::ALL {
            if self.rows(row).next().is_none() {
                continue;
            }
            let taus: Vec<f64> = self
                .rows(row)
                .map(|e| e.scores.calibration.kendall_tau_b.unwrap_or(f64::NAN))
                .collect();
            let (q, c) = self.mean(row);
            let _ = writeln!(out, "{}\tmean\t{q}\t{c}\t{}", row.name(), mean(&taus));
        }
        out
    }
}

/// Trains every ablation configuration from each seed's base model and
/// scores it.
pub fn ablation_report(
    contexts: &[SeedContext],
    cfg: &TrainConfig,
    rows: &[AblationRow],
    workers: usize,
) -> Result<AblationReport> {
    if contexts.is_empty() {
        return Err(Error::Argument("at least one seed is required".into()));
    }
    let jobs: Vec<(usize, AblationRow)> = (0..contexts.len())
        .flat_map(|s| rows.iter().map(move |&r| (s, r)))
        .collect();
    let entries = map_ordered(workers, &jobs, |_, &(s, row)| -> Result<AblationEntry> {
        let ctx = &contexts[s];
        let run_cfg = TrainConfig {
            seed: ctx.seed,
            ablation: row.ablation(),
            workers: 1,
            ..cfg.clone()
        };
        let trained = run_pl(ctx.base, ctx.pl_sets, &run_cfg)?.params;
        Ok(AblationEntry {
            row,
            seed: ctx.seed,
            scores: ModelScores::evaluate(&trained, ctx, 1)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefcore::{Candidate, Method, PromptedExample};
    use crate::seqmodel::{ModelDims, ParamBlock};
    use crate::tokens::{EOS, PROMPT_BASE};

    fn s(v: &[u32]) -> TokenSeq {
        TokenSeq(v.to_vec())
    }

    #[test]
    fn bleu_worked_example() {
        let b = ngram_bleu(&[s(&[4, 5, 6, 7])], &[s(&[4, 5, 6, 7, 8])]).unwrap();
        assert!((b - (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-12);
        assert!((b - 0.778801).abs() < 1e-6);
    }

    #[test]
    fn bleu_identity_and_eos() {
        let c = vec![s(&[4, 5, EOS]), s(&[6, 7, 8, 9, 10, EOS])];
        assert_eq!(ngram_bleu(&c, &c).unwrap(), 1.0);
        let stripped = vec![s(&[4, 5]), s(&[6, 7, 8, 9, 10])];
        assert_eq!(ngram_bleu(&stripped, &c).unwrap(), 1.0);
    }

    #[test]
    fn bleu_smoothing_keeps_positive() {
        // Long corpus with unigram matches but no 4-gram matches.
        let c: Vec<TokenSeq> = (0..10).map(|_| s(&[4, 5, 4, 5, 4, 5, 4, 5])).collect();
        let r: Vec<TokenSeq> = (0..10).map(|_| s(&[4, 4, 5, 5, 4, 4, 5, 5])).collect();
        let b = ngram_bleu(&c, &r).unwrap();
        assert!(b > 0.0 && b < 1.0, "{b}");
    }

    #[test]
    fn bleu_guards() {
        assert!(ngram_bleu(&[s(&[4])], &[]).is_err());
        assert!(ngram_bleu(&[s(&[4])], &[s(&[EOS])]).is_err());
        assert_eq!(ngram_bleu(&[s(&[])], &[s(&[4])]).unwrap(), 0.0);
    }

    #[test]
    fn correlation_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau_b(&x, &[10.0, 20.0, 30.0, 40.0]), Some(1.0));
        assert_eq!(kendall_tau_b(&x, &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        assert!((pearson(&x, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pearson(&x, &[5.0; 4]), None);
        assert_eq!(kendall_tau_b(&[3.0; 4], &x), None);
    }

    #[test]
    fn tau_b_with_ties_by_hand() {
        // x = (1,1,2,3), y = (1,2,3,4): nc = 5, nd = 0, n0 = 6, x ties 1.
        let t = kendall_tau_b(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((t - 5.0 / (5.0f64 * 6.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn calibration_drops_undefined_sets() {
        let r = CalibrationReport::from_pairs(&[
            (vec![3.0, 2.0, 1.0], vec![-1.0, -2.0, -3.0]),
            (vec![2.0, 2.0, 2.0], vec![-1.0, -2.0, -3.0]),
            (vec![3.0, 2.0, 1.0], vec![-3.0, -2.0, -1.0]),
        ]);
        assert_eq!(r.undefined_sets, 1);
        assert_eq!(r.defined_tau, 2);
        assert_eq!(r.kendall_tau_b, Some(0.0));
        assert_eq!(r.pair_counts, vec![3, 3, 3]);
        let none = CalibrationReport::from_pairs(&[(vec![1.0, 1.0], vec![0.0, 1.0])]);
        assert_eq!(none.pearson, None);
    }

    #[test]
    fn k_selection_ranks_examples() {
        assert_eq!(k_selection_ranks(KMode::Forward, 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(k_selection_ranks(KMode::Reverse, 3).unwrap(), vec![0, 3, 4]);
        assert_eq!(k_selection_ranks(KMode::Reverse, 2).unwrap(), vec![0, 4]);
        for m in [KMode::Forward, KMode::Reverse] {
            assert_eq!(k_selection_ranks(m, 5).unwrap(), vec![0, 1, 2, 3, 4]);
            assert!(k_selection_ranks(m, 1).is_err());
            assert!(k_selection_ranks(m, 6).is_err());
        }
    }

    fn example() -> PromptedExample {
        PromptedExample {
            source: s(&[4, 5]),
            target: s(&[5, 4, EOS]),
            prompt_prefix: s(&[PROMPT_BASE]),
        }
    }

    fn five_set() -> PreferenceSet {
        let scores = [5.0, 4.0, 3.0, 2.0, 1.0];
        let candidates = scores
            .iter()
            .enumerate()
            .map(|(i, &sc)| {
                let m = if i == 0 { Method::Reference } else { Method::Nucleus };
                Candidate::scored(s(&[4 + i as u32, EOS]), m, [sc, sc]).unwrap()
            })
            .collect();
        PreferenceSet {
            example: example(),
            candidates,
            oracle: None,
        }
    }

    #[test]
    fn k_selection_on_dataset() {
        let ds = PreferenceDataset {
            sets: vec![five_set(), five_set()],
            vocab_size: 12,
            metadata: Default::default(),
        };
        let rev = k_selection(&ds, KMode::Reverse, 2).unwrap();
        assert_eq!(rev.sets[0].scores(), vec![5.0, 1.0]);
        assert_eq!(
            k_selection(&ds, KMode::Forward, 5).unwrap(),
            k_selection(&ds, KMode::Reverse, 5).unwrap()
        );
        let mut short = ds.clone();
        short.sets[1].candidates.pop();
        assert!(k_selection(&short, KMode::Forward, 2).is_err());
    }

    /// Emits `next(prev)` with near certainty, as in the decoding tests.
    fn copy_model(v: usize, map: impl Fn(usize) -> usize) -> ModelParams {
        let dims = ModelDims {
            vocab_size: v,
            embed_dim: v,
            hidden_dim: v,
            window: 1,
        };
        let mut p = ModelParams::zeros(dims);
        for t in 0..v {
            p.block_mut(ParamBlock::Embedding)[t * v + t] = 1.0;
            p.block_mut(ParamBlock::HiddenWeight)[t * v + t] = 50.0;
        }
        p.block_mut(ParamBlock::HiddenBias).iter_mut().for_each(|b| *b = -25.0);
        for prev in 0..v {
            p.block_mut(ParamBlock::OutputWeight)[map(prev) * v + prev] = 15.0;
        }
        let w2 = p.block(ParamBlock::OutputWeight).to_vec();
        for n in 0..v {
            p.block_mut(ParamBlock::OutputBias)[n] = w2[n * v..(n + 1) * v].iter().sum();
        }
        p
    }

    #[test]
    fn corpus_quality_extremes() {
        // Gold for every record is (6, EOS); the model emits SEP -> 6 -> EOS.
        let rec = ParallelRecord {
            source: s(&[4]),
            reference: s(&[6, EOS]),
            gold: s(&[6, EOS]),
            corrupted: false,
        };
        let recs = vec![rec.clone(), rec];
        let prompt = s(&[PROMPT_BASE]);
        let perfect = copy_model(8, |t| match t {
            2 => 6,
            6 => 1,
            _ => 0,
        });
        assert_eq!(corpus_quality(&perfect, &recs, &prompt, 1).unwrap(), 1.0);
        let empty = copy_model(8, |t| if t == 2 { 1 } else { 0 });
        assert_eq!(corpus_quality(&empty, &recs, &prompt, 1).unwrap(), 0.0);
        assert!(corpus_quality(&perfect, &[], &prompt, 1).is_err());
    }

    #[test]
    fn curve_tsv_layout() {
        let c = ExperimentCurve {
            series: "a".into(),
            x: vec![0.5, 1.0],
            seeds: vec![1, 2],
            values: vec![vec![0.1, 0.3], vec![0.5, 0.7]],
        };
        let tsv = c.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], CURVE_TSV_HEADER);
        assert_eq!(lines.len(), 1 + 4 + 2);
        assert_eq!(lines[5], "a\t0.5\tmean\t0.2");
    }
}
