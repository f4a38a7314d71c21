//! Two-stage optimization: imitation (SFT) on parallel data, then the
//! preference stage minimizing `L_PLD + beta * L_SFT(best candidate)`.
//!
//! Both stages share one loop: seeded per-epoch shuffling, mini-batches
//! whose per-example gradients are computed (optionally in parallel) and
//! summed in dataset order, a linear warmup/decay schedule, and Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::map_ordered;
use crate::plmodel::{compute_distances, pld_loss_grad, DistanceMatrix};
use crate::prefcore::{PreferenceSet, PromptedExample};
use crate::seqmodel::{backward, sequence_logprob, sft_loss_grad, ModelParams, ParamBlock};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Grid of SFT weights searched for the preference stage.
pub const BETA_GRID: [f64; 3] = [0.0, 0.05, 0.1];

/// Which loss terms the preference stage uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    /// Weight likelihoods by score gaps; otherwise every distance is 1.
    pub use_distance: bool,
    /// Add `beta * L_SFT` on the best candidate; otherwise beta is forced to 0.
    pub use_sft_term: bool,
    /// Include the listwise preference term at all.
    #[serde(default = "default_true")]
    pub use_pl_term: bool,
}

fn default_true() -> bool {
    true
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        use_distance: true,
        use_sft_term: true,
        use_pl_term: true,
    };
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

/// The five preference-stage configurations compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationRow {
    FullPl,
    NoSftTerm,
    NoDistance,
    NoBoth,
    SftOnly,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        AblationRow::FullPl,
        AblationRow::NoSftTerm,
        AblationRow::NoDistance,
        AblationRow::NoBoth,
        AblationRow::SftOnly,
    ];

    pub fn ablation(self) -> Ablation {
        let (use_distance, use_sft_term, use_pl_term) = match self {
            AblationRow::FullPl => (true, true, true),
            AblationRow::NoSftTerm => (true, false, true),
            AblationRow::NoDistance => (false, true, true),
            AblationRow::NoBoth => (false, false, true),
            AblationRow::SftOnly => (true, true, false),
        };
        Ablation {
            use_distance,
            use_sft_term,
            use_pl_term,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::FullPl => "full_pl",
            AblationRow::NoSftTerm => "wo_sft_term",
            AblationRow::NoDistance => "wo_distance",
            AblationRow::NoBoth => "wo_both",
            AblationRow::SftOnly => "sft_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_ratio: f64,
    pub ablation: Ablation,
    /// Threads for per-example gradients; results do not depend on it.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.1,
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            warmup_ratio: 0.1,
            ablation: Ablation::FULL,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Checks ranges; returns warnings for legal but unusual settings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Argument(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Argument(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Argument(format!(
                "warmup ratio must be in [0, 1], got {}",
                self.warmup_ratio
            )));
        }
        let mut warnings = Vec::new();
        if !BETA_GRID.contains(&self.beta) {
            warnings.push(format!(
                "beta {} is outside the searched grid {BETA_GRID:?}",
                self.beta
            ));
        }
        Ok(warnings)
    }

    /// SFT weight actually applied, after the ablation switch.
    pub fn effective_beta(&self) -> f64 {
        if self.ablation.use_sft_term {
            self.beta
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug)]
pub struct CombinedLoss {
    /// `pld + effective_beta * sft`.
    pub loss: f64,
    pub pld: f64,
    /// Imitation loss on the best candidate (reported even when unweighted).
    pub sft: f64,
    pub log_likelihoods: Vec<f64>,
    pub grad: ModelParams,
}

/// Preference-stage loss and gradient for one sorted set.
pub fn combined_loss_grad(
    params: &ModelParams,
    set: &PreferenceSet,
    cfg: &TrainConfig,
) -> Result<CombinedLoss> {
    let mut lls = Vec::with_capacity(set.candidates.len());
    let mut caches = Vec::with_capacity(set.candidates.len());
    for c in &set.candidates {
        let (ll, cache) = sequence_logprob(params, &set.example, &c.tokens)?;
        lls.push(ll);
        caches.push(cache);
    }
    let beta = cfg.effective_beta();

    let (pld, mut coeffs) = if cfg.ablation.use_pl_term {
        let dm = if cfg.ablation.use_distance {
            compute_distances(&set.scores())?
        } else {
            DistanceMatrix::ones(lls.len())
        };
        pld_loss_grad(&lls, &dm)?
    } else {
        (0.0, vec![0.0; lls.len()])
    };
    let sft = -lls[0];
    coeffs[0] -= beta;

    let mut grad = ModelParams::zeros(params.dims());
    for (cache, &c) in caches.iter().zip(&coeffs) {
        if c != 0.0 {
            // `backward` accumulates d ll / d theta; the loss gradient is
            // d loss / d ll times that.
            backward(params, cache, c, &mut grad);
        }
    }
    Ok(CombinedLoss {
        loss: pld + beta * sft,
        pld,
        sft,
        log_likelihoods: lls,
        grad,
    })
}

/// First and second moment accumulators for Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ModelParams) -> Self {
        let n = params.as_slice().len();
        OptState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any state.
pub fn optimizer_step(
    state: &mut OptState,
    params: &mut ModelParams,
    grad: &ModelParams,
    lr: f64,
) -> Result<()> {
    let n = params.as_slice().len();
    if grad.as_slice().len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Argument(
            "optimizer state, parameters and gradient differ in shape".into(),
        ));
    }
    grad.check_finite()?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Learning rate at zero-based `step` of `total`: linear warmup over the
/// first `warmup_ratio` of steps, then linear decay to zero.
pub fn scheduled_lr(base: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base * (total - step) as f64 / (total - warmup).max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    /// Mean training loss per epoch, measured before each batch's update.
    pub epoch_losses: Vec<f64>,
}

fn train_loop<F>(
    params: &ModelParams,
    n_items: usize,
    cfg: &TrainConfig,
    loss_grad: F,
) -> Result<TrainOutput>
where
    F: Fn(&ModelParams, usize) -> Result<(f64, ModelParams)> + Sync + Send,
{
    cfg.validate()?;
    if n_items == 0 {
        return Err(Error::Argument("training data is empty".into()));
    }
    let mut params = params.clone();
    let mut state = OptState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n_items).collect();
    let batches_per_epoch = n_items.div_ceil(cfg.batch_size);
    let total = batches_per_epoch * cfg.epochs;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = map_ordered(cfg.workers, batch, |_, &i| loss_grad(&params, i));
            let mut grad = ModelParams::zeros(params.dims());
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                grad.add_scaled(&g, 1.0);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            epoch_loss += batch_loss;
            grad.scale(1.0 / batch.len() as f64);
            let lr = scheduled_lr(cfg.learning_rate, step, total, cfg.warmup_ratio);
            optimizer_step(&mut state, &mut params, &grad, lr)?;
            step += 1;
        }
        epoch_losses.push(epoch_loss / n_items as f64);
    }
    Ok(TrainOutput {
        params,
        epoch_losses,
    })
}

/// Imitation training on (prompt, source, reference) examples.
pub fn run_sft(
    params: &ModelParams,
    data: &[PromptedExample],
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    train_loop(params, data.len(), cfg, |p, i| {
        sft_loss_grad(p, &data[i], &data[i].target)
    })
}

/// Preference training on sorted preference sets.
pub fn run_pl(params: &ModelParams, sets: &[PreferenceSet], cfg: &TrainConfig) -> Result<TrainOutput> {
    if let Some(i) = sets.iter().position(|s| s.candidates.len() < 2 || !s.is_sorted()) {
        return Err(Error::Validation(format!(
            "preference set {i} is not a sorted set of at least 2 candidates"
        )));
    }
    train_loop(params, sets.len(), cfg, |p, i| {
        combined_loss_grad(p, &sets[i], cfg).map(|c| (c.loss, c.grad))
    })
}

/// Names the parameter block holding a flat index; used in diagnostics.
pub fn block_name(params: &ModelParams, index: usize) -> &'static str {
    let (block, _): (ParamBlock, usize) = params.locate(index);
    block.name()
}
