//! `pld`: command-line driver for the preference-learning lab.
//!
//! Exit status is 0 on success, 1 for invalid input (flags, files, data)
//! and 2 for runtime faults.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use commands::{
    AblateRun, AxiomCheckRun, CalibrateRun, EvalRun, GenDataRun, GenPrefsRun, GradcheckRun,
    KselectRun, PipelineRun, PlRun, PlateauRun, SelectRun, SftRun,
};
use config::{resolve, Overrides};

/// Bad input rather than a runtime fault; maps to exit status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nformats: preference datasets pld-prefs v1, checkpoints PLDM v1, run manifests pld-manifest v1"
);

#[derive(Parser)]
#[command(name = "pld", version, long_version = LONG_VERSION)]
#[command(about = "Distance-weighted Plackett-Luce preference learning on a synthetic translation task")]
struct Cli {
    /// Threads for data-parallel work; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON config (or a run manifest); flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TaskFlags {
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Probability that a stored reference receives one random edit.
    #[arg(long)]
    noise: Option<f64>,
    /// Seed of the substitution map.
    #[arg(long)]
    task_seed: Option<u64>,
}

impl TaskFlags {
    fn apply(&self, o: &mut Overrides, prefix: &str) {
        o.set(&format!("{prefix}vocab_size"), self.vocab_size)
            .set(&format!("{prefix}min_len"), self.min_len)
            .set(&format!("{prefix}max_len"), self.max_len)
            .set(&format!("{prefix}noise_rate"), self.noise)
            .set(&format!("{prefix}task_seed"), self.task_seed);
    }
}

#[derive(Args)]
struct ShapeFlags {
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
}

impl ShapeFlags {
    fn apply(&self, o: &mut Overrides, prefix: &str) {
        o.set(&format!("{prefix}embed_dim"), self.embed_dim)
            .set(&format!("{prefix}hidden_dim"), self.hidden_dim)
            .set(&format!("{prefix}window"), self.window);
    }
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup: Option<f64>,
    /// Seed of the shuffling order.
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainFlags {
    fn apply(&self, o: &mut Overrides, prefix: &str) {
        o.set(&format!("{prefix}learning_rate"), self.lr)
            .set(&format!("{prefix}epochs"), self.epochs)
            .set(&format!("{prefix}batch_size"), self.batch_size)
            .set(&format!("{prefix}warmup_ratio"), self.warmup)
            .set(&format!("{prefix}seed"), self.seed);
    }
}

#[derive(Args)]
struct PrefLossFlags {
    /// Weight of the imitation term on the best candidate.
    #[arg(long)]
    beta: Option<f64>,
    /// Use unit distances (plain Plackett-Luce).
    #[arg(long)]
    no_distance: bool,
    /// Drop the imitation term (forces beta to 0).
    #[arg(long)]
    no_sft_term: bool,
    /// Train only the imitation term on the best candidate.
    #[arg(long)]
    sft_only: bool,
}

impl PrefLossFlags {
    fn apply(&self, o: &mut Overrides, prefix: &str) {
        o.set(&format!("{prefix}beta"), self.beta)
            .flag(&format!("{prefix}ablation.use_distance"), self.no_distance, false)
            .flag(&format!("{prefix}ablation.use_sft_term"), self.no_sft_term, false)
            .flag(&format!("{prefix}ablation.use_pl_term"), self.sft_only, false);
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a parallel corpus for the toy task.
    GenData {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        task: TaskFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Imitation training on a parallel corpus.
    Sft {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[command(flatten)]
        shape: ShapeFlags,
        /// Seed of the parameter initialization.
        #[arg(long)]
        init_seed: Option<u64>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Generate and annotate five candidates per source.
    GenPrefs {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Standard deviation of each annotator's score noise.
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long)]
        annotator_seed: Option<u64>,
        /// Seed of the nucleus samples.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Keep the hardest preference sets.
    Select {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        prefs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        band_lo: Option<f64>,
        #[arg(long)]
        band_hi: Option<f64>,
    },
    /// Preference training from a checkpoint.
    Pl {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        prefs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        loss: PrefLossFlags,
    },
    /// Corpus quality, BLEU and (optionally) calibration of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score/likelihood correlations on a preference dataset.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        prefs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continued imitation training on growing data versus preference training.
    Plateau {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        extra: Option<PathBuf>,
        #[arg(long)]
        prefs: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward or reverse K-selection of sorted preference sets.
    Kselect {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        prefs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train and score the five preference-loss ablations.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        prefs: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArg,
        /// sft, pld or combined.
        #[arg(long)]
        loss: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Residual of the Choice Axiom under score distances.
    AxiomCheck {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        scores: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        ll: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// gen-data, sft, gen-prefs, select, pl and eval in one run.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        task: TaskFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-execute a run from its manifest.
    Replay {
        manifest: PathBuf,
    },
}

fn run<T: Serialize + DeserializeOwned + Default>(
    command: &str,
    cfg: ConfigArg,
    o: Overrides,
    workers: usize,
) -> Result<()> {
    let resolved: T = resolve(cfg.config.as_deref(), o)?;
    commands::execute(command, serde_json::to_value(&resolved)?, workers)
}

fn dispatch(cli: Cli) -> Result<()> {
    let w = cli.workers.max(1);
    let mut o = Overrides::default();
    match cli.cmd {
        Cmd::GenData { cfg, n, seed, task, out } => {
            o.set("n", n).set("seed", seed).set("out", out);
            task.apply(&mut o, "task.");
            run::<GenDataRun>("gen-data", cfg, o, w)
        }
        Cmd::Sft { cfg, data, out, vocab_size, shape, init_seed, train } => {
            o.set("data", data)
                .set("out", out)
                .set("vocab_size", vocab_size)
                .set("init_seed", init_seed);
            shape.apply(&mut o, "model.");
            train.apply(&mut o, "train.");
            run::<SftRun>("sft", cfg, o, w)
        }
        Cmd::GenPrefs { cfg, model, data, out, noise_sigma, annotator_seed, seed } => {
            o.set("model", model)
                .set("data", data)
                .set("out", out)
                .set("annotator.noise_sigma", noise_sigma)
                .set("annotator.seed", annotator_seed)
                .set("seed", seed);
            run::<GenPrefsRun>("gen-prefs", cfg, o, w)
        }
        Cmd::Select { cfg, prefs, out, k, band_lo, band_hi } => {
            let mut resolved: SelectRun = resolve(cfg.config.as_deref(), {
                o.set("prefs", prefs).set("out", out).set("k", k);
                o
            })?;
            resolved.band = (band_lo.unwrap_or(resolved.band.0), band_hi.unwrap_or(resolved.band.1));
            commands::execute("select", serde_json::to_value(&resolved)?, w)
        }
        Cmd::Pl { cfg, model, prefs, out, train, loss } => {
            o.set("model", model).set("prefs", prefs).set("out", out);
            train.apply(&mut o, "train.");
            loss.apply(&mut o, "train.");
            run::<PlRun>("pl", cfg, o, w)
        }
        Cmd::Eval { cfg, model, data, heldout, out } => {
            o.set("model", model)
                .set("data", data)
                .set("heldout", heldout)
                .set("out", out);
            run::<EvalRun>("eval", cfg, o, w)
        }
        Cmd::Calibrate { cfg, model, prefs, out } => {
            o.set("model", model).set("prefs", prefs).set("out", out);
            run::<CalibrateRun>("calibrate", cfg, o, w)
        }
        Cmd::Plateau { cfg, model, extra, prefs, test, fractions, seeds, out } => {
            o.set("model", model)
                .set("extra", extra)
                .set("prefs", prefs)
                .set("test", test)
                .set("fractions", fractions)
                .set("seeds", seeds)
                .set("out", out);
            run::<PlateauRun>("plateau", cfg, o, w)
        }
        Cmd::Kselect { cfg, prefs, out, mode, k } => {
            let mode = mode
                .map(|m| m.parse::<pld_core::evalkit::KMode>())
                .transpose()?;
            o.set("prefs", prefs).set("out", out).set("mode", mode).set("k", k);
            run::<KselectRun>("kselect", cfg, o, w)
        }
        Cmd::Ablate { cfg, model, prefs, test, heldout, seeds, train, beta, out } => {
            o.set("model", model)
                .set("prefs", prefs)
                .set("test", test)
                .set("heldout", heldout)
                .set("seeds", seeds)
                .set("train.beta", beta)
                .set("out", out);
            train.apply(&mut o, "train.");
            run::<AblateRun>("ablate", cfg, o, w)
        }
        Cmd::Gradcheck { cfg, loss, trials, seed } => {
            o.set("loss", loss).set("trials", trials).set("seed", seed);
            run::<GradcheckRun>("gradcheck", cfg, o, w)
        }
        Cmd::AxiomCheck { cfg, scores, ll, trials } => {
            o.set("scores", scores).set("ll", ll).set("trials", trials);
            run::<AxiomCheckRun>("axiom-check", cfg, o, w)
        }
        Cmd::Pipeline { cfg, seed, task, out } => {
            o.set("pipeline.seed", seed).set("out", out);
            task.apply(&mut o, "pipeline.task.");
            run::<PipelineRun>("pipeline", cfg, o, w)
        }
        Cmd::Replay { manifest } => commands::replay(&manifest, w),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<pld_core::Error>() {
            return if err.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
