//! Ranking mathematics.
//!
//! Plackett-Luce treats a ranking as a sequence of softmax choices over the
//! items not yet placed. The distance-weighted variant raises each item's
//! likelihood to a per-step power `d_i^j` (the score gap between the item
//! chosen at step `i` and item `j`), which in log space scales the
//! log-likelihood before the softmax. Everything here works on log values and
//! log-sum-exp; with distances up to 5 and sequence log-likelihoods in the
//! tens, direct exponentiation underflows.

use rand::Rng;

use crate::error::{Error, Result};

/// `log(sum(exp(xs)))`, stable for large magnitudes. Empty input gives `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Argument(format!("{name}[{i}] = {} is not finite", xs[i]))),
        None => Ok(()),
    }
}

fn check_permutation(ranking: &[usize], len: usize) -> Result<()> {
    let mut seen = vec![false; len];
    if ranking.len() != len {
        return Err(Error::Argument(format!(
            "ranking has {} entries for {len} items",
            ranking.len()
        )));
    }
    for &r in ranking {
        if r >= len || std::mem::replace(&mut seen[r], true) {
            return Err(Error::Argument(format!("{ranking:?} is not a permutation")));
        }
    }
    Ok(())
}

/// Log-probability of `ranking` (best first) under Plackett-Luce with the
/// given per-item rewards.
pub fn pl_ranking_log_prob(rewards: &[f64], ranking: &[usize]) -> Result<f64> {
    check_finite("rewards", rewards)?;
    check_permutation(ranking, rewards.len())?;
    let ordered: Vec<f64> = ranking.iter().map(|&i| rewards[i]).collect();
    Ok((0..ordered.len().saturating_sub(1))
        .map(|i| ordered[i] - log_sum_exp(&ordered[i..]))
        .sum())
}

pub fn pl_ranking_prob(rewards: &[f64], ranking: &[usize]) -> Result<f64> {
    pl_ranking_log_prob(rewards, ranking).map(f64::exp)
}

/// Negative log-likelihood of the identity ranking: `rewards[0]` is the
/// preferred item.
pub fn pl_nll(rewards: &[f64]) -> Result<f64> {
    if rewards.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 items, got {}",
            rewards.len()
        )));
    }
    check_finite("rewards", rewards)?;
    Ok(-(0..rewards.len() - 1)
        .map(|i| rewards[i] - log_sum_exp(&rewards[i..]))
        .sum::<f64>())
}

/// Per-step score gaps between candidates sorted best-first.
///
/// Row `i` holds `d_i^j` for `j >= i`; the diagonal entry is the largest gap
/// of that row. A step whose diagonal is zero (all remaining candidates tied
/// with candidate `i`) is degenerate and contributes nothing to the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    len: usize,
    rows: Vec<Vec<f64>>,
    degenerate: Vec<bool>,
}

impl DistanceMatrix {
    /// Matrix with every entry 1 and no degenerate steps; the distance-weighted
    /// loss then reduces to the plain Plackett-Luce loss.
    pub fn ones(len: usize) -> Self {
        let steps = len.saturating_sub(1);
        DistanceMatrix {
            len,
            rows: (0..steps).map(|i| vec![1.0; len - i]).collect(),
            degenerate: vec![false; steps],
        }
    }

    /// Builds a matrix from explicit rows (`rows[i][k]` is `d_i^{i+k}`).
    /// Used to probe the loss with distances not derived from scores.
    pub fn from_rows(len: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != len.saturating_sub(1)
            || rows.iter().enumerate().any(|(i, r)| r.len() != len - i)
        {
            return Err(Error::Argument("distance rows have the wrong shape".into()));
        }
        if rows.iter().flatten().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Argument("distances must be finite and non-negative".into()));
        }
        let degenerate = rows.iter().map(|r| r[0] == 0.0).collect();
        Ok(DistanceMatrix {
            len,
            rows,
            degenerate,
        })
    }

    /// Number of candidates.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `d_i^j` with zero-based indices, `j >= i`, `i < len - 1`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j - i]
    }

    pub fn is_degenerate(&self, step: usize) -> bool {
        self.degenerate[step]
    }

    pub fn steps(&self) -> usize {
        self.rows.len()
    }
}

/// Distance matrix from preference scores sorted non-increasing.
pub fn compute_distances(scores: &[f64]) -> Result<DistanceMatrix> {
    let len = scores.len();
    if len < 2 {
        return Err(Error::Argument(format!("need at least 2 scores, got {len}")));
    }
    check_finite("scores", scores)?;
    if let Some(i) = scores.windows(2).position(|w| w[0] < w[1]) {
        return Err(Error::Argument(format!(
            "scores not sorted descending at position {i}: {} < {}",
            scores[i],
            scores[i + 1]
        )));
    }
    let mut rows = Vec::with_capacity(len - 1);
    let mut degenerate = Vec::with_capacity(len - 1);
    for i in 0..len - 1 {
        let gaps: Vec<f64> = scores[i + 1..].iter().map(|s| scores[i] - s).collect();
        let diag = gaps.iter().copied().fold(0.0, f64::max);
        let mut row = Vec::with_capacity(len - i);
        row.push(diag);
        row.extend(gaps);
        rows.push(row);
        degenerate.push(diag == 0.0);
    }
    Ok(DistanceMatrix {
        len,
        rows,
        degenerate,
    })
}

fn check_aligned(ll: &[f64], dm: &DistanceMatrix) -> Result<()> {
    if ll.len() != dm.len() {
        return Err(Error::Argument(format!(
            "{} log-likelihoods for a {}-candidate distance matrix",
            ll.len(),
            dm.len()
        )));
    }
    if ll.len() < 2 {
        return Err(Error::Argument("need at least 2 candidates".into()));
    }
    check_finite("ll", ll)
}

/// Scaled log-likelihoods `d_i^j * ll_j` for step `i`, `j >= i`.
fn step_logits(ll: &[f64], dm: &DistanceMatrix, i: usize) -> Vec<f64> {
    (i..ll.len()).map(|j| dm.get(i, j) * ll[j]).collect()
}

/// `lse - z[0]`, computed without cancellation when the preferred item
/// dominates and the step loss is near zero.
fn step_nll(logits: &[f64], lse: f64) -> f64 {
    let z0 = logits[0];
    if logits[1..].iter().all(|&z| z <= z0) {
        logits[1..].iter().map(|&z| (z - z0).exp()).sum::<f64>().ln_1p()
    } else {
        lse - z0
    }
}

/// Distance-weighted Plackett-Luce loss for one preference set.
pub fn pld_loss(ll: &[f64], dm: &DistanceMatrix) -> Result<f64> {
    Ok(pld_loss_grad(ll, dm)?.0)
}

/// Gradient of [`pld_loss`] with respect to the log-likelihoods.
pub fn pld_grad(ll: &[f64], dm: &DistanceMatrix) -> Result<Vec<f64>> {
    Ok(pld_loss_grad(ll, dm)?.1)
}

pub fn pld_loss_grad(ll: &[f64], dm: &DistanceMatrix) -> Result<(f64, Vec<f64>)> {
    check_aligned(ll, dm)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; ll.len()];
    for i in 0..dm.steps() {
        if dm.is_degenerate(i) {
            continue;
        }
        let logits = step_logits(ll, dm, i);
        let lse = log_sum_exp(&logits);
        loss += step_nll(&logits, lse);
        grad[i] -= dm.get(i, i);
        for (k, &z) in logits.iter().enumerate() {
            grad[i + k] += dm.get(i, i + k) * (z - lse).exp();
        }
    }
    Ok((loss, grad))
}

/// Pairwise preference probability with distance `d` acting as inverse
/// scale: `sigmoid(d * (ll1 - ll2))`.
pub fn binary_pref_prob(ll1: f64, ll2: f64, d: f64) -> Result<f64> {
    if !(d >= 0.0) || !d.is_finite() {
        return Err(Error::Argument(format!("distance must be non-negative, got {d}")));
    }
    let z = d * (ll1 - ll2);
    Ok(if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    })
}

/// Density of the difference of two Gumbel variables with common scale:
/// a logistic with the given location and scale.
pub fn logistic_diff_density(x: f64, loc: f64, scale: f64) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::Argument(format!("scale must be positive, got {scale}")));
    }
    let sech = 1.0 / ((x - loc) / (2.0 * scale)).cosh();
    Ok(sech * sech / (4.0 * scale))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSpec {
    locations: Vec<f64>,
    scale: f64,
}

impl GumbelSpec {
    pub fn new(locations: Vec<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Argument(format!("scale must be positive, got {scale}")));
        }
        check_finite("locations", &locations)?;
        Ok(GumbelSpec { locations, scale })
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Plackett-Luce rewards equivalent to this spec: `s_i / scale`.
    pub fn equivalent_rewards(&self) -> Vec<f64> {
        self.locations.iter().map(|s| s / self.scale).collect()
    }
}

const UNIFORM_CLAMP: f64 = 1e-12;

/// One standard Gumbel draw via `-ln(-ln U)`.
pub fn standard_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

/// Draws latent preferences `s_i + scale * G_i` and returns item indices
/// sorted by preference, best first.
pub fn gumbel_sample_ranking<R: Rng + ?Sized>(spec: &GumbelSpec, rng: &mut R) -> Vec<usize> {
    let draws: Vec<f64> = spec
        .locations
        .iter()
        .map(|s| s + spec.scale * standard_gumbel(rng))
        .collect();
    let mut idx: Vec<usize> = (0..draws.len()).collect();
    idx.sort_by(|&a, &b| draws[b].total_cmp(&draws[a]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct MleFit {
    /// Fitted rewards, gauge-fixed so the last item has reward exactly 0.
    pub rewards: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

pub const MLE_STEP: f64 = 0.1;
pub const MLE_TOL: f64 = 1e-8;
pub const MLE_MAX_ITERS: usize = 10_000;

/// Maximum-likelihood Plackett-Luce rewards for observed rankings over
/// `n_items` items, by gradient ascent on the mean log-likelihood.
///
/// Separable data (an item never beaten, or never beating anything) has no
/// finite maximizer; the fit then stops at the iteration cap and reports
/// `converged = false` with the last iterate.
pub fn mle_fit_rewards(rankings: &[Vec<usize>], n_items: usize) -> Result<MleFit> {
    if rankings.is_empty() {
        return Err(Error::Argument("need at least one ranking".into()));
    }
    if n_items < 2 {
        return Err(Error::Argument("need at least two items".into()));
    }
    // Identical rankings share a gradient term; collapse them to counts.
    let mut counts: std::collections::BTreeMap<&[usize], f64> = Default::default();
    for r in rankings {
        check_permutation(r, n_items)?;
        *counts.entry(r.as_slice()).or_default() += 1.0;
    }
    let total = rankings.len() as f64;
    let weighted: Vec<(&[usize], f64)> = counts.into_iter().map(|(r, c)| (r, c / total)).collect();

    let mut rewards = vec![0.0; n_items];
    let mut grad = vec![0.0; n_items];
    let mut exps = vec![0.0; n_items];
    let mut grad_norm = f64::INFINITY;
    for iter in 0..MLE_MAX_ITERS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &(ranking, w) in &weighted {
            // Suffix sums of exp(r) in ranking order give each step's softmax.
            let max = ranking.iter().map(|&i| rewards[i]).fold(f64::NEG_INFINITY, f64::max);
            for &i in ranking {
                exps[i] = (rewards[i] - max).exp();
            }
            let mut suffix = 0.0;
            let mut suffix_sums = vec![0.0; n_items];
            for pos in (0..n_items).rev() {
                suffix += exps[ranking[pos]];
                suffix_sums[pos] = suffix;
            }
            // d/dr_k of log-lik: [k chosen at step t] - sum_{t: k in remaining(t)} p_t(k)
            let mut cum_inv = 0.0;
            for pos in 0..n_items {
                let item = ranking[pos];
                if pos < n_items - 1 {
                    grad[item] += w;
                    cum_inv += 1.0 / suffix_sums[pos];
                }
                grad[item] -= w * exps[item] * cum_inv;
            }
        }
        grad[n_items - 1] = 0.0;
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm <= MLE_TOL {
            return Ok(MleFit {
                rewards,
                converged: true,
                iterations: iter,
                grad_norm,
            });
        }
        for (r, g) in rewards.iter_mut().zip(&grad) {
            *r += MLE_STEP * g;
        }
    }
    Ok(MleFit {
        rewards,
        converged: false,
        iterations: MLE_MAX_ITERS,
        grad_norm,
    })
}

/// Log form of the choice-axiom condition for three candidates:
/// `(d_1^2 - d_2^2) ll_2 - (d_1^3 - d_2^3) ll_3`. Zero when the odds of the
/// second over the third candidate do not depend on whether the first is
/// still available.
pub fn choice_axiom_residual(ll: &[f64], dm: &DistanceMatrix) -> Result<f64> {
    if ll.len() != 3 || dm.len() != 3 {
        return Err(Error::Argument(format!(
            "choice-axiom residual is defined for 3 candidates, got {}",
            ll.len()
        )));
    }
    check_finite("ll", ll)?;
    Ok((dm.get(0, 1) - dm.get(1, 1)) * ll[1] - (dm.get(0, 2) - dm.get(1, 2)) * ll[2])
}
