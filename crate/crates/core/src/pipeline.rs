//! End-to-end run for one seed: corpora, imitation base model, preference
//! sets, hard-example selection, preference training and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    gen_parallel_corpus, gen_preference_sets, select_hard_examples, AnnotatorSpec, GenStats,
    ParallelRecord, Selection, TaskConfig, ToyTaskSpec, DEFAULT_BAND,
};
use crate::error::{Error, Result};
use crate::evalkit::{decode_corpus, mean_quality, ngram_bleu, ModelScores, SeedContext};
use crate::parallel::derive_seed;
use crate::prefcore::{PreferenceDataset, PreferenceSet, TokenSeq};
use crate::seqmodel::{ModelDims, ModelParams, DEFAULT_EMBED_DIM, DEFAULT_HIDDEN_DIM, DEFAULT_WINDOW};
use crate::trainer::{run_pl, run_sft, TrainConfig, TrainOutput};

const STREAM_CORPUS: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_SFT: u64 = 3;
const STREAM_PREFS: u64 = 4;
const STREAM_HELDOUT: u64 = 5;
const STREAM_ANNOTATE: u64 = 6;
const STREAM_PL: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub window: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            window: DEFAULT_WINDOW,
        }
    }
}

impl ModelShape {
    pub fn dims(&self, vocab_size: usize) -> ModelDims {
        ModelDims {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            window: self.window,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSizes {
    /// Parallel pairs for the imitation stage.
    pub sft: usize,
    /// Additional parallel pairs for continued imitation training.
    pub extra: usize,
    pub test: usize,
    /// Sources annotated before hard-example selection.
    pub pref_pool: usize,
    pub pref: usize,
    pub heldout_pool: usize,
    pub heldout: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes {
            sft: 2000,
            extra: 8000,
            test: 200,
            pref_pool: 1200,
            pref: 400,
            heldout_pool: 300,
            heldout: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelShape,
    pub sizes: DataSizes,
    pub annotator: AnnotatorSpec,
    pub band: (f64, f64),
    pub sft: TrainConfig,
    pub pl: TrainConfig,
    #[serde(skip)]
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            task: TaskConfig::default(),
            // A narrow hidden layer keeps five seeds of the full pipeline within minutes.
            model: ModelShape {
                hidden_dim: 6,
                ..ModelShape::default()
            },
            sizes: DataSizes::default(),
            annotator: AnnotatorSpec::default(),
            band: DEFAULT_BAND,
            sft: TrainConfig {
                learning_rate: 3e-2,
                epochs: 150,
                beta: 0.0,
                ..TrainConfig::default()
            },
            pl: TrainConfig {
                learning_rate: 1e-2,
                epochs: 60,
                beta: 0.1,
                ..TrainConfig::default()
            },
            workers: 1,
        }
    }
}

impl PipelineConfig {
    pub fn task_spec(&self) -> Result<ToyTaskSpec> {
        ToyTaskSpec::new(&self.task)
    }

    /// Training config for the imitation stage with the run's seeds filled in.
    pub fn sft_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, STREAM_SFT),
            workers: self.workers,
            ..self.sft.clone()
        }
    }

    pub fn pl_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, STREAM_PL),
            workers: self.workers,
            ..self.pl.clone()
        }
    }

    pub fn annotator(&self) -> AnnotatorSpec {
        AnnotatorSpec {
            seed: derive_seed(self.annotator.seed ^ self.seed, STREAM_ANNOTATE),
            ..self.annotator
        }
    }

    pub fn init_params(&self) -> ModelParams {
        ModelParams::init(
            self.model.dims(self.task.vocab_size),
            derive_seed(self.seed, STREAM_INIT),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpora {
    pub sft: Vec<ParallelRecord>,
    pub extra: Vec<ParallelRecord>,
    pub test: Vec<ParallelRecord>,
    pub pref_pool: Vec<ParallelRecord>,
    pub heldout_pool: Vec<ParallelRecord>,
}

fn gen_n(task: &ToyTaskSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<ParallelRecord>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    gen_parallel_corpus(task, n, rng)
}

/// Draws every corpus of the run from one seeded stream, in a fixed order.
pub fn gen_corpora(cfg: &PipelineConfig) -> Result<Corpora> {
    let task = cfg.task_spec()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_CORPUS));
    let s = &cfg.sizes;
    Ok(Corpora {
        sft: gen_n(&task, s.sft, &mut rng)?,
        extra: gen_n(&task, s.extra, &mut rng)?,
        test: gen_n(&task, s.test, &mut rng)?,
        pref_pool: gen_n(&task, s.pref_pool, &mut rng)?,
        heldout_pool: gen_n(&task, s.heldout_pool, &mut rng)?,
    })
}

pub fn train_base(cfg: &PipelineConfig, sft: &[ParallelRecord]) -> Result<TrainOutput> {
    let prompt = cfg.task_spec()?.prompt_prefix();
    let data: Vec<_> = sft.iter().map(|r| r.example(&prompt)).collect();
    run_sft(&cfg.init_params(), &data, &cfg.sft_config())
}

/// Annotated preference sets for the preference pool (`heldout = false`)
/// or the held-out pool.
pub fn build_prefs(
    cfg: &PipelineConfig,
    base: &ModelParams,
    records: &[ParallelRecord],
    heldout: bool,
) -> Result<(Vec<PreferenceSet>, GenStats)> {
    let prompt = cfg.task_spec()?.prompt_prefix();
    let stream = if heldout { STREAM_HELDOUT } else { STREAM_PREFS };
    let mut annotator = cfg.annotator();
    annotator.seed = derive_seed(annotator.seed, stream);
    gen_preference_sets(
        base,
        records,
        &prompt,
        &annotator,
        derive_seed(cfg.seed, stream),
        cfg.workers,
    )
}

pub fn select(cfg: &PipelineConfig, pool: &[PreferenceSet], k: usize) -> Result<Selection> {
    if k == 0 {
        return Err(Error::Argument("selection size must be at least 1".into()));
    }
    select_hard_examples(pool, cfg.band, k.min(pool.len()))
}

pub fn train_pl(cfg: &PipelineConfig, base: &ModelParams, sets: &[PreferenceSet]) -> Result<TrainOutput> {
    run_pl(base, sets, &cfg.pl_config())
}

/// Wraps preference sets with the run's vocabulary and metadata.
pub fn dataset(cfg: &PipelineConfig, sets: Vec<PreferenceSet>) -> PreferenceDataset {
    let mut metadata = serde_json::Map::new();
    metadata.insert("seed".into(), cfg.seed.into());
    metadata.insert("task_seed".into(), cfg.task.task_seed.into());
    PreferenceDataset {
        sets,
        vocab_size: cfg.task.vocab_size,
        metadata,
    }
}

/// All intermediate products of one seed's run.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub config: PipelineConfig,
    pub corpora: Corpora,
    pub base: TrainOutput,
    pub pref_pool: Vec<PreferenceSet>,
    pub pref_stats: GenStats,
    pub selected: Selection,
    pub heldout: Selection,
    pub pl: TrainOutput,
}

impl SeedRun {
    pub fn prompt_prefix(&self) -> TokenSeq {
        self.config
            .task_spec()
            .expect("validated when the run was built")
            .prompt_prefix()
    }

    pub fn context<'a>(&'a self, prompt: &'a TokenSeq) -> SeedContext<'a> {
        SeedContext {
            seed: self.config.seed,
            base: &self.base.params,
            pl_sets: &self.selected.sets,
            test: &self.corpora.test,
            heldout: &self.heldout.sets,
            prompt_prefix: prompt,
        }
    }
}

/// Data generation through preference training for one seed.
pub fn run_seed(cfg: &PipelineConfig) -> Result<SeedRun> {
    let corpora = gen_corpora(cfg)?;
    let base = train_base(cfg, &corpora.sft)?;
    let (pref_pool, pref_stats) = build_prefs(cfg, &base.params, &corpora.pref_pool, false)?;
    let selected = select(cfg, &pref_pool, cfg.sizes.pref)?;
    let (heldout_pool, _) = build_prefs(cfg, &base.params, &corpora.heldout_pool, true)?;
    let heldout = select(cfg, &heldout_pool, cfg.sizes.heldout)?;
    let pl = train_pl(cfg, &base.params, &selected.sets)?;
    Ok(SeedRun {
        config: cfg.clone(),
        corpora,
        base,
        pref_pool,
        pref_stats,
        selected,
        heldout,
        pl,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub corpus_quality: f64,
    pub bleu: f64,
    pub calibration: crate::evalkit::CalibrationReport,
}

pub fn evaluate(
    params: &ModelParams,
    test: &[ParallelRecord],
    heldout: &[PreferenceSet],
    prompt: &TokenSeq,
    workers: usize,
) -> Result<EvalSummary> {
    let outputs = decode_corpus(params, test, prompt, workers)?;
    let golds: Vec<TokenSeq> = test.iter().map(|r| r.gold.clone()).collect();
    let calibration = if heldout.is_empty() {
        crate::evalkit::CalibrationReport::from_pairs(&[])
    } else {
        crate::evalkit::calibration(params, heldout, workers)?
    };
    Ok(EvalSummary {
        corpus_quality: mean_quality(&outputs, test),
        bleu: ngram_bleu(&outputs, &golds)?,
        calibration,
    })
}

/// SFT and PL scores of a finished run.
pub fn score_run(run: &SeedRun, workers: usize) -> Result<(ModelScores, ModelScores)> {
    let prompt = run.prompt_prefix();
    let ctx = run.context(&prompt);
    Ok((
        ModelScores::evaluate(&run.base.params, &ctx, workers)?,
        ModelScores::evaluate(&run.pl.params, &ctx, workers)?,
    ))
}
