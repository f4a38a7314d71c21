//! Finite-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sft_loss_grad, ModelParams, ParamBlock};
use crate::error::Result;
use crate::prefcore::{rubric_score, Candidate, Method, PreferenceSet, PromptedExample, TokenSeq};
use crate::trainer::{combined_loss_grad, Ablation, TrainConfig};
use crate::{prefcore, tokens};

pub const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;
const CHECK_BETA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Sft,
    Pld,
    Combined,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sft" => Ok(LossKind::Sft),
            "pld" => Ok(LossKind::Pld),
            "combined" => Ok(LossKind::Combined),
            other => Err(format!("unknown loss kind `{other}` (sft, pld, combined)")),
        }
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn random_seq<R: Rng>(rng: &mut R, vocab: usize, len: usize, eos: bool) -> TokenSeq {
    let lo = tokens::PROMPT_BASE as usize;
    let mut t: Vec<u32> = (0..len).map(|_| rng.random_range(lo..vocab) as u32).collect();
    if eos {
        t.push(tokens::EOS);
    }
    TokenSeq(t)
}

fn random_set<R: Rng>(rng: &mut R, vocab: usize) -> PreferenceSet {
    let src_len = rng.random_range(1..5);
    let example = PromptedExample {
        source: random_seq(rng, vocab, src_len, false),
        target: TokenSeq(vec![tokens::EOS]),
        prompt_prefix: TokenSeq(vec![tokens::PROMPT_BASE]),
    };
    let n = rng.random_range(2..=4);
    let candidates = (0..n)
        .map(|i| {
            let a = rubric_score(rng.random_range(0..=prefcore::RUBRIC_STEPS));
            let b = rubric_score(rng.random_range(0..=prefcore::RUBRIC_STEPS));
            let len = rng.random_range(1..5);
            let method = if i == 0 { Method::Reference } else { Method::Nucleus };
            Candidate::scored(random_seq(rng, vocab, len, true), method, [a, b])
                .expect("grid scores")
        })
        .collect();
    let mut set = PreferenceSet {
        example,
        candidates,
        oracle: None,
    };
    set = prefcore::sort_preference_set(set).expect("valid set");
    set.example.target = set.candidates[0].tokens.clone();
    set
}

fn loss_and_grad(
    params: &ModelParams,
    set: &PreferenceSet,
    kind: LossKind,
) -> Result<(f64, ModelParams)> {
    match kind {
        LossKind::Sft => sft_loss_grad(params, &set.example, &set.example.target),
        LossKind::Pld | LossKind::Combined => {
            let cfg = TrainConfig {
                beta: if kind == LossKind::Combined { CHECK_BETA } else { 0.0 },
                ablation: Ablation::FULL,
                ..TrainConfig::default()
            };
            let out = combined_loss_grad(params, set, &cfg)?;
            Ok((out.loss, out.grad))
        }
    }
}

/// Worst relative error between analytic and central-difference directional
/// derivatives over `trials` random preference sets.
///
/// Each trial draws one Rademacher direction over all parameters plus one
/// restricted to each parameter block, so every block is checked on its own.
/// Directional derivatives keep the comparison away from the round-off floor
/// that dominates tiny individual gradient entries.
pub fn grad_check(params: &ModelParams, kind: LossKind, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let n = params.as_slice().len();
    for _ in 0..trials.max(1) {
        let set = random_set(&mut rng, params.vocab_size());
        let (_, grad) = loss_and_grad(params, &set, kind)?;

        let mut directions: Vec<Vec<f64>> = Vec::with_capacity(6);
        directions.push((0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect());
        for block in ParamBlock::ALL {
            let mut probe = ModelParams::zeros(params.dims());
            for x in probe.block_mut(block) {
                *x = if rng.random::<bool>() { 1.0 } else { -1.0 };
            }
            directions.push(probe.as_slice().to_vec());
        }

        for dir in directions {
            let analytic: f64 = grad.as_slice().iter().zip(&dir).map(|(g, u)| g * u).sum();
            let mut plus = params.clone();
            let mut minus = params.clone();
            for ((p, m), u) in plus
                .as_mut_slice()
                .iter_mut()
                .zip(minus.as_mut_slice().iter_mut())
                .zip(&dir)
            {
                *p += FD_STEP * u;
                *m -= FD_STEP * u;
            }
            let (lp, _) = loss_and_grad(&plus, &set, kind)?;
            let (lm, _) = loss_and_grad(&minus, &set, kind)?;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}
