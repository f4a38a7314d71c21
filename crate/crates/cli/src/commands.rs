//! Resolved run descriptions and their execution. Every run struct is what
//! gets written to the manifest, so `replay` can rebuild and re-execute it.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use pld_core::datagen::{
    self, gen_parallel_corpus, gen_preference_sets, AnnotatorSpec, ParallelRecord, TaskConfig,
    ToyTaskSpec, DEFAULT_BAND,
};
use pld_core::evalkit::{self, ablation_report, k_selection, plateau_experiment, KMode, SeedContext};
use pld_core::pipeline::{self, ModelShape, PipelineConfig};
use pld_core::plmodel::{choice_axiom_residual, compute_distances, DistanceMatrix};
use pld_core::prefcore::{validate_dataset, PreferenceDataset, TokenSeq};
use pld_core::seqmodel::{read_checkpoint, write_checkpoint, LossKind, ModelDims, ModelParams};
use pld_core::trainer::{run_pl, run_sft, AblationRow, TrainConfig};
use pld_core::{tokens, Error};

use crate::config::{manifest_path, read_manifest, write_json, write_manifest, Manifest};
use crate::UsageError;

fn require(path: &Path, flag: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(UsageError(format!("missing required {flag}")).into());
    }
    Ok(())
}

fn require_input(path: &Path, flag: &str) -> Result<()> {
    require(path, flag)?;
    if !path.is_file() {
        return Err(UsageError(format!("{flag} {}: file not found", path.display())).into());
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    require_input(path, "--model")?;
    let params = read_checkpoint(BufReader::new(File::open(path)?))
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(params)
}

fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
        .with_context(|| format!("writing checkpoint {}", path.display()))?;
    Ok(())
}

/// A corpus and the task recorded in its manifest, when there is one.
fn load_corpus(path: &Path, flag: &str) -> Result<(Vec<ParallelRecord>, Option<TaskConfig>)> {
    require_input(path, flag)?;
    let records = datagen::read_corpus(path)?;
    let mpath = manifest_path(path);
    let task = if mpath.is_file() {
        let m = read_manifest(&mpath)?;
        m.config
            .get("task")
            .cloned()
            .map(serde_json::from_value::<TaskConfig>)
            .transpose()?
    } else {
        None
    };
    Ok((records, task))
}

fn load_prefs(path: &Path, flag: &str) -> Result<PreferenceDataset> {
    require_input(path, flag)?;
    let ds = PreferenceDataset::load(path)?;
    let report = validate_dataset(&ds);
    if let Some(v) = report.violations.first() {
        return Err(Error::Validation(format!(
            "{}: {} violation(s), first: {v}",
            path.display(),
            report.violations.len()
        ))
        .into());
    }
    Ok(ds)
}

/// The corpus vocabulary must match the checkpoint's.
fn check_corpus_vocab(
    params: &ModelParams,
    records: &[ParallelRecord],
    task: Option<&TaskConfig>,
) -> Result<()> {
    let v = params.vocab_size();
    let data_vocab = match task {
        Some(t) => t.vocab_size,
        None => records
            .iter()
            .flat_map(|r| r.source.0.iter().chain(&r.reference.0).chain(&r.gold.0))
            .max()
            .map_or(0, |&m| m as usize + 1)
            .max(v.min(1)),
    };
    let mismatch = match task {
        Some(_) => data_vocab != v,
        None => data_vocab > v,
    };
    if mismatch {
        return Err(Error::VocabMismatch {
            checkpoint: v,
            data: data_vocab,
        }
        .into());
    }
    Ok(())
}

fn check_prefs_vocab(params: &ModelParams, ds: &PreferenceDataset) -> Result<()> {
    if ds.vocab_size != params.vocab_size() {
        return Err(Error::VocabMismatch {
            checkpoint: params.vocab_size(),
            data: ds.vocab_size,
        }
        .into());
    }
    Ok(())
}

fn prompt_prefix() -> TokenSeq {
    TokenSeq(vec![tokens::PROMPT_BASE])
}

fn warn(warnings: Vec<String>) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataRun {
    pub task: TaskConfig,
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn gen_data(run: &GenDataRun) -> Result<Value> {
    require(&run.out, "--out")?;
    let task = ToyTaskSpec::new(&run.task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let records = gen_parallel_corpus(&task, run.n, &mut rng)?;
    datagen::write_corpus(&records, &run.out)?;
    let corrupted = records.iter().filter(|r| r.corrupted).count();
    Ok(json!({ "records": records.len(), "corrupted": corrupted }))
}

// --------------------------------------------------------------------- sft

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftRun {
    pub data: PathBuf,
    pub out: PathBuf,
    /// Taken from the corpus manifest when absent.
    pub vocab_size: Option<usize>,
    pub model: ModelShape,
    pub init_seed: u64,
    pub train: TrainConfig,
}

pub fn sft(run: &SftRun, workers: usize) -> Result<Value> {
    require(&run.out, "--out")?;
    let (records, task) = load_corpus(&run.data, "--data")?;
    let vocab = run
        .vocab_size
        .or(task.as_ref().map(|t| t.vocab_size))
        .ok_or_else(|| UsageError("vocabulary size unknown: pass --vocab-size".into()))?;
    let init = ModelParams::init(run.model.dims(vocab), run.init_seed);
    check_corpus_vocab(&init, &records, task.as_ref())?;
    warn(run.train.validate()?);
    let prompt = prompt_prefix();
    let data: Vec<_> = records.iter().map(|r| r.example(&prompt)).collect();
    let cfg = TrainConfig {
        workers,
        ..run.train.clone()
    };
    let out = run_sft(&init, &data, &cfg)?;
    save_checkpoint(&out.params, &run.out)?;
    Ok(json!({ "epoch_losses": out.epoch_losses }))
}

// --------------------------------------------------------------- gen-prefs

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenPrefsRun {
    pub model: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub annotator: AnnotatorSpec,
    pub seed: u64,
}

pub fn gen_prefs(run: &GenPrefsRun, workers: usize) -> Result<Value> {
    require(&run.out, "--out")?;
    let params = load_checkpoint(&run.model)?;
    let (records, task) = load_corpus(&run.data, "--data")?;
    check_corpus_vocab(&params, &records, task.as_ref())?;
    let (sets, stats) = gen_preference_sets(
        &params,
        &records,
        &prompt_prefix(),
        &run.annotator,
        run.seed,
        workers,
    )?;
    let mut metadata = serde_json::Map::new();
    metadata.insert("seed".into(), run.seed.into());
    let ds = PreferenceDataset {
        sets,
        vocab_size: params.vocab_size(),
        metadata,
    };
    ds.save(&run.out)?;
    Ok(serde_json::to_value(stats)?)
}

// ------------------------------------------------------------------ select

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectRun {
    pub prefs: PathBuf,
    pub out: PathBuf,
    pub k: usize,
    pub band: (f64, f64),
}

impl Default for SelectRun {
    fn default() -> Self {
        SelectRun {
            prefs: PathBuf::new(),
            out: PathBuf::new(),
            k: 400,
            band: DEFAULT_BAND,
        }
    }
}

pub fn select(run: &SelectRun) -> Result<Value> {
    require(&run.out, "--out")?;
    let ds = load_prefs(&run.prefs, "--prefs")?;
    let sel = datagen::select_hard_examples(&ds.sets, run.band, run.k)?;
    if sel.shortfall {
        eprintln!("warning: fewer than {} sets fell inside the band; filled from outside", run.k);
    }
    let out = PreferenceDataset {
        sets: sel.sets,
        vocab_size: ds.vocab_size,
        metadata: ds.metadata,
    };
    out.save(&run.out)?;
    Ok(json!({ "selected": out.sets.len(), "shortfall": sel.shortfall, "indices": sel.indices }))
}

// ---------------------------------------------------------------------- pl

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlRun {
    pub model: PathBuf,
    pub prefs: PathBuf,
    pub out: PathBuf,
    pub train: TrainConfig,
}

pub fn pl(run: &PlRun, workers: usize) -> Result<Value> {
    require(&run.out, "--out")?;
    let params = load_checkpoint(&run.model)?;
    let ds = load_prefs(&run.prefs, "--prefs")?;
    check_prefs_vocab(&params, &ds)?;
    warn(run.train.validate()?);
    let cfg = TrainConfig {
        workers,
        ..run.train.clone()
    };
    let out = run_pl(&params, &ds.sets, &cfg)?;
    save_checkpoint(&out.params, &run.out)?;
    Ok(json!({ "epoch_losses": out.epoch_losses }))
}

// -------------------------------------------------------------------- eval

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRun {
    pub model: PathBuf,
    pub data: PathBuf,
    pub heldout: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn eval(run: &EvalRun, workers: usize) -> Result<Value> {
    let params = load_checkpoint(&run.model)?;
    let (records, task) = load_corpus(&run.data, "--data")?;
    check_corpus_vocab(&params, &records, task.as_ref())?;
    let heldout = match &run.heldout {
        Some(p) => {
            let ds = load_prefs(p, "--heldout")?;
            check_prefs_vocab(&params, &ds)?;
            ds.sets
        }
        None => Vec::new(),
    };
    let summary = pipeline::evaluate(&params, &records, &heldout, &prompt_prefix(), workers)?;
    let v = serde_json::to_value(&summary)?;
    emit(&v, run.out.as_deref())?;
    Ok(v)
}

fn emit(v: &Value, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_json(p, v),
        None => {
            println!("{}", serde_json::to_string_pretty(v)?);
            Ok(())
        }
    }
}

// --------------------------------------------------------------- calibrate

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateRun {
    pub model: PathBuf,
    pub prefs: PathBuf,
    pub out: Option<PathBuf>,
}

pub fn calibrate(run: &CalibrateRun, workers: usize) -> Result<Value> {
    let params = load_checkpoint(&run.model)?;
    let ds = load_prefs(&run.prefs, "--prefs")?;
    check_prefs_vocab(&params, &ds)?;
    let report = evalkit::calibration(&params, &ds.sets, workers)?;
    let v = serde_json::to_value(&report)?;
    emit(&v, run.out.as_deref())?;
    Ok(v)
}

// ----------------------------------------------------------------- plateau

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauRun {
    pub model: PathBuf,
    pub extra: PathBuf,
    pub prefs: PathBuf,
    pub test: PathBuf,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub sft: TrainConfig,
    pub pl: TrainConfig,
    pub out: PathBuf,
}

impl Default for PlateauRun {
    fn default() -> Self {
        let p = PipelineConfig::default();
        PlateauRun {
            model: PathBuf::new(),
            extra: PathBuf::new(),
            prefs: PathBuf::new(),
            test: PathBuf::new(),
            fractions: vec![0.25, 0.5, 1.0],
            seeds: vec![0],
            sft: p.sft,
            pl: p.pl,
            out: PathBuf::new(),
        }
    }
}

pub fn plateau(run: &PlateauRun, workers: usize) -> Result<Value> {
    require(&run.out, "--out")?;
    let base = load_checkpoint(&run.model)?;
    let (extra, extra_task) = load_corpus(&run.extra, "--extra")?;
    let (test, test_task) = load_corpus(&run.test, "--test")?;
    check_corpus_vocab(&base, &extra, extra_task.as_ref())?;
    check_corpus_vocab(&base, &test, test_task.as_ref())?;
    let ds = load_prefs(&run.prefs, "--prefs")?;
    check_prefs_vocab(&base, &ds)?;
    let prompt = prompt_prefix();
    let contexts: Vec<SeedContext> = run
        .seeds
        .iter()
        .map(|&seed| SeedContext {
            seed,
            base: &base,
            pl_sets: &ds.sets,
            test: &test,
            heldout: &[],
            prompt_prefix: &prompt,
        })
        .collect();
    let pools: Vec<&[ParallelRecord]> = vec![&extra; contexts.len()];
    let (sft, pl) = plateau_experiment(&contexts, &pools, &run.fractions, &run.sft, &run.pl, workers)?;
    let tsv = format!("{}{}", sft.to_tsv(), pl.tsv_rows());
    std::fs::write(&run.out, tsv)?;
    Ok(json!({ "continued_sft_mean": sft.mean(), "pl_mean": pl.mean() }))
}

// ----------------------------------------------------------------- kselect

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KselectRun {
    pub prefs: PathBuf,
    pub out: PathBuf,
    pub mode: KMode,
    pub k: usize,
}

impl Default for KselectRun {
    fn default() -> Self {
        KselectRun {
            prefs: PathBuf::new(),
            out: PathBuf::new(),
            mode: KMode::Forward,
            k: 5,
        }
    }
}

pub fn kselect(run: &KselectRun) -> Result<Value> {
    require(&run.out, "--out")?;
    let ds = load_prefs(&run.prefs, "--prefs")?;
    let out = k_selection(&ds, run.mode, run.k)?;
    out.save(&run.out)?;
    Ok(json!({ "sets": out.sets.len() }))
}

// ------------------------------------------------------------------ ablate

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateRun {
    pub model: PathBuf,
    pub prefs: PathBuf,
    pub test: PathBuf,
    pub heldout: PathBuf,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub out: PathBuf,
}

pub fn ablate(run: &AblateRun, workers: usize) -> Result<Value> {
    require(&run.out, "--out")?;
    let base = load_checkpoint(&run.model)?;
    let ds = load_prefs(&run.prefs, "--prefs")?;
    check_prefs_vocab(&base, &ds)?;
    let (test, task) = load_corpus(&run.test, "--test")?;
    check_corpus_vocab(&base, &test, task.as_ref())?;
    let heldout = load_prefs(&run.heldout, "--heldout")?;
    check_prefs_vocab(&base, &heldout)?;
    let seeds = if run.seeds.is_empty() { vec![0] } else { run.seeds.clone() };
    let prompt = prompt_prefix();
    let contexts: Vec<SeedContext> = seeds
        .iter()
        .map(|&seed| SeedContext {
            seed,
            base: &base,
            pl_sets: &ds.sets,
            test: &test,
            heldout: &heldout.sets,
            prompt_prefix: &prompt,
        })
        .collect();
    let report = ablation_report(&contexts, &run.train, &AblationRow::ALL, workers)?;
    std::fs::write(&run.out, report.to_tsv())?;
    let means: serde_json::Map<String, Value> = AblationRow::ALL
        .iter()
        .map(|&r| {
            let (q, c) = report.mean(r);
            (r.name().to_string(), json!({ "corpus_quality": q, "calibration": c }))
        })
        .collect();
    Ok(Value::Object(means))
}

// --------------------------------------------------------------- gradcheck

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckRun {
    pub loss: String,
    pub trials: usize,
    pub seed: u64,
    pub vocab_size: usize,
    pub model: ModelShape,
    /// Multiplies the initial parameters so the check runs away from the
    /// near-uniform starting point.
    pub init_scale: f64,
    pub tolerance: f64,
}

impl Default for GradcheckRun {
    fn default() -> Self {
        GradcheckRun {
            loss: "combined".into(),
            trials: 50,
            seed: 0,
            vocab_size: 12,
            model: ModelShape {
                embed_dim: 4,
                hidden_dim: 8,
                window: 4,
            },
            init_scale: 5.0,
            tolerance: 1e-5,
        }
    }
}

pub fn gradcheck(run: &GradcheckRun) -> Result<Value> {
    let kind: LossKind = run.loss.parse().map_err(UsageError)?;
    let dims: ModelDims = run.model.dims(run.vocab_size);
    let mut params = ModelParams::init(dims, run.seed);
    params.scale(run.init_scale);
    let err = pld_core::seqmodel::grad_check(&params, kind, run.trials, run.seed)?;
    let pass = err <= run.tolerance;
    println!("{} max relative error {err:.3e} ({})", run.loss, if pass { "pass" } else { "fail" });
    if !pass {
        anyhow::bail!("gradient check failed: {err:.3e} > {:.0e}", run.tolerance);
    }
    Ok(json!({ "max_relative_error": err }))
}

// ------------------------------------------------------------- axiom-check

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AxiomCheckRun {
    /// Scores of three candidates, best first.
    pub scores: Vec<f64>,
    /// Log-likelihoods aligned with `scores`.
    pub ll: Vec<f64>,
    /// Random inputs checked for a zero residual under unit distances.
    pub trials: usize,
    pub seed: u64,
}

impl Default for AxiomCheckRun {
    fn default() -> Self {
        AxiomCheckRun {
            scores: vec![6.0, 5.0, 3.0],
            ll: vec![0.0, 0.5f64.ln(), 0.25f64.ln()],
            trials: 100,
            seed: 0,
        }
    }
}

pub fn axiom_check(run: &AxiomCheckRun) -> Result<Value> {
    let dm = compute_distances(&run.scores)?;
    let residual = choice_axiom_residual(&run.ll, &dm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..run.trials {
        let ll: Vec<f64> = (0..3).map(|_| -rng.random_range(0.0..20.0)).collect();
        worst = worst.max(choice_axiom_residual(&ll, &DistanceMatrix::ones(3))?.abs());
    }
    println!("residual with score distances: {residual:.6}");
    println!("largest |residual| with unit distances over {} inputs: {worst}", run.trials);
    Ok(json!({ "residual": residual, "unit_distance_max_abs": worst }))
}

// ---------------------------------------------------------------- pipeline

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineRun {
    pub pipeline: PipelineConfig,
    pub out: PathBuf,
}

pub fn pipeline(run: &PipelineRun, workers: usize) -> Result<Value> {
    require(&run.out, "--out")?;
    std::fs::create_dir_all(&run.out)?;
    let cfg = PipelineConfig {
        workers,
        ..run.pipeline.clone()
    };
    warn(cfg.sft.validate()?);
    warn(cfg.pl.validate()?);
    let dir = &run.out;
    let s = pipeline::run_seed(&cfg)?;
    let corpus_manifest = |name: &str, records: &[ParallelRecord]| -> Result<()> {
        let path = dir.join(name);
        datagen::write_corpus(records, &path)?;
        let desc = GenDataRun {
            task: cfg.task.clone(),
            n: records.len(),
            seed: cfg.seed,
            out: path.clone(),
        };
        write_manifest(&manifest_path(&path), "gen-data", &desc, Value::Null, None)
    };
    corpus_manifest("corpus_sft.jsonl", &s.corpora.sft)?;
    corpus_manifest("corpus_extra.jsonl", &s.corpora.extra)?;
    corpus_manifest("corpus_test.jsonl", &s.corpora.test)?;
    save_checkpoint(&s.base.params, &dir.join("base.ckpt"))?;
    pipeline::dataset(&cfg, s.pref_pool.clone()).save(&dir.join("prefs_pool.jsonl"))?;
    pipeline::dataset(&cfg, s.selected.sets.clone()).save(&dir.join("prefs_selected.jsonl"))?;
    pipeline::dataset(&cfg, s.heldout.sets.clone()).save(&dir.join("prefs_heldout.jsonl"))?;
    save_checkpoint(&s.pl.params, &dir.join("pl.ckpt"))?;

    let prompt = s.prompt_prefix();
    let base_eval =
        pipeline::evaluate(&s.base.params, &s.corpora.test, &s.heldout.sets, &prompt, workers)?;
    let pl_eval = pipeline::evaluate(&s.pl.params, &s.corpora.test, &s.heldout.sets, &prompt, workers)?;
    let eval = json!({ "sft": base_eval, "pl": pl_eval });
    write_json(&dir.join("eval.json"), &eval)?;
    Ok(json!({
        "sft_epoch_losses": s.base.epoch_losses,
        "pl_epoch_losses": s.pl.epoch_losses,
        "prefs": s.pref_stats,
        "selection_shortfall": s.selected.shortfall,
        "heldout_shortfall": s.heldout.shortfall,
        "eval": eval,
    }))
}

// ------------------------------------------------------------------ replay

/// Where a command's manifest goes, given its resolved run.
pub fn manifest_location(command: &str, config: &Value) -> Option<PathBuf> {
    let out = config.get("out").and_then(Value::as_str).filter(|s| !s.is_empty())?;
    Some(match command {
        "pipeline" => Path::new(out).join("manifest.json"),
        _ => manifest_path(Path::new(out)),
    })
}

/// Executes one command from its resolved configuration and writes the
/// manifest when the command has an output location.
pub fn execute(command: &str, config: Value, workers: usize) -> Result<()> {
    fn parse<T: serde::de::DeserializeOwned>(v: Value) -> Result<T> {
        serde_json::from_value(v).map_err(|e| UsageError(format!("invalid configuration: {e}")).into())
    }
    let start = Instant::now();
    let (resolved, results) = match command {
        "gen-data" => {
            let r: GenDataRun = parse(config)?;
            (serde_json::to_value(&r)?, gen_data(&r)?)
        }
        "sft" => {
            let r: SftRun = parse(config)?;
            (serde_json::to_value(&r)?, sft(&r, workers)?)
        }
        "gen-prefs" => {
            let r: GenPrefsRun = parse(config)?;
            (serde_json::to_value(&r)?, gen_prefs(&r, workers)?)
        }
        "select" => {
            let r: SelectRun = parse(config)?;
            (serde_json::to_value(&r)?, select(&r)?)
        }
        "pl" => {
            let r: PlRun = parse(config)?;
            (serde_json::to_value(&r)?, pl(&r, workers)?)
        }
        "eval" => {
            let r: EvalRun = parse(config)?;
            (serde_json::to_value(&r)?, eval(&r, workers)?)
        }
        "calibrate" => {
            let r: CalibrateRun = parse(config)?;
            (serde_json::to_value(&r)?, calibrate(&r, workers)?)
        }
        "plateau" => {
            let r: PlateauRun = parse(config)?;
            (serde_json::to_value(&r)?, plateau(&r, workers)?)
        }
        "kselect" => {
            let r: KselectRun = parse(config)?;
            (serde_json::to_value(&r)?, kselect(&r)?)
        }
        "ablate" => {
            let r: AblateRun = parse(config)?;
            (serde_json::to_value(&r)?, ablate(&r, workers)?)
        }
        "gradcheck" => {
            let r: GradcheckRun = parse(config)?;
            (serde_json::to_value(&r)?, gradcheck(&r)?)
        }
        "axiom-check" => {
            let r: AxiomCheckRun = parse(config)?;
            (serde_json::to_value(&r)?, axiom_check(&r)?)
        }
        "pipeline" => {
            let r: PipelineRun = parse(config)?;
            (serde_json::to_value(&r)?, pipeline(&r, workers)?)
        }
        other => return Err(UsageError(format!("unknown command {other:?}")).into()),
    };
    if let Some(path) = manifest_location(command, &resolved) {
        let seconds = start.elapsed().as_secs_f64();
        write_manifest(&path, command, &resolved, results, Some(seconds))?;
    }
    Ok(())
}

pub fn replay(path: &Path, workers: usize) -> Result<()> {
    let Manifest { command, config, .. } = read_manifest(path)?;
    execute(&command, config, workers)
}
