//! Beam search and nucleus sampling.

use std::cmp::Ordering;

use rand::Rng;

use super::{check_vocab, conditioning_prefix, ModelParams};
use crate::error::{Error, Result};
use crate::prefcore::{PromptedExample, TokenSeq};
use crate::tokens::EOS;

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Generated tokens, ending with the end-of-sequence id unless truncated.
    pub tokens: TokenSeq,
    /// Summed log-probability of the generated tokens.
    pub logprob: f64,
    /// True when no end-of-sequence id was produced within `max_len`.
    pub truncated: bool,
}

fn better(a: &(Vec<u32>, f64), b: &(Vec<u32>, f64)) -> Ordering {
    // Higher score first; lexicographically smaller token sequence on ties.
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Length-unnormalized beam search. `max_len` bounds the generated length,
/// end-of-sequence id included.
///
/// Each step expands every live hypothesis by every token and keeps the
/// `beam_size` best expansions; expansions ending in the end-of-sequence id
/// are moved to the finished list. Search stops once the best finished score
/// beats every live score, since scores only decrease.
pub fn beam_search(
    params: &ModelParams,
    example: &PromptedExample,
    beam_size: usize,
    max_len: usize,
) -> Result<Decoded> {
    if beam_size == 0 {
        return Err(Error::Argument("beam size must be at least 1".into()));
    }
    let prefix = conditioning_prefix(example);
    check_vocab(&prefix, params.vocab_size(), "prompt/source")?;

    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
    let mut history = prefix.clone();
    for _ in 0..max_len {
        let mut expansions = Vec::with_capacity(live.len() * params.vocab_size());
        for (toks, score) in &live {
            history.truncate(prefix.len());
            history.extend_from_slice(toks);
            let lp = params.next_log_probs(&history);
            for (t, l) in lp.into_iter().enumerate() {
                let mut next = toks.clone();
                next.push(t as u32);
                expansions.push((next, score + l));
            }
        }
        expansions.sort_by(better);
        expansions.truncate(beam_size);
        live.clear();
        for hyp in expansions {
            if hyp.0.last() == Some(&EOS) {
                finished.push(hyp);
            } else {
                live.push(hyp);
            }
        }
        let best_live = live.iter().map(|h| h.1).fold(f64::NEG_INFINITY, f64::max);
        let best_done = finished.iter().map(|h| h.1).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_done > best_live {
            break;
        }
    }

    let (pool, truncated) = if finished.is_empty() {
        (live, true)
    } else {
        (finished, false)
    };
    let best = pool.into_iter().min_by(better).unwrap_or((Vec::new(), 0.0));
    Ok(Decoded {
        tokens: TokenSeq(best.0),
        logprob: best.1,
        truncated,
    })
}

/// Greedy decoding: the most probable token at every step, lowest id on ties.
pub fn greedy_decode(
    params: &ModelParams,
    example: &PromptedExample,
    max_len: usize,
) -> Result<Decoded> {
    let prefix = conditioning_prefix(example);
    check_vocab(&prefix, params.vocab_size(), "prompt/source")?;
    let mut history = prefix.clone();
    let mut logprob = 0.0;
    for _ in 0..max_len {
        let lp = params.next_log_probs(&history);
        let (t, l) = lp
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (t, &l)| if l > acc.1 { (t, l) } else { acc });
        history.push(t as u32);
        logprob += l;
        if t as u32 == EOS {
            break;
        }
    }
    let tokens = history[prefix.len()..].to_vec();
    let truncated = tokens.last() != Some(&EOS);
    Ok(Decoded {
        tokens: TokenSeq(tokens),
        logprob,
        truncated,
    })
}

/// The truncated support kept by nucleus sampling at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct NucleusSet {
    /// Kept token ids, most probable first.
    pub tokens: Vec<usize>,
    /// Renormalized probabilities aligned with `tokens`.
    pub probs: Vec<f64>,
    /// Probability mass of the kept tokens before renormalization.
    pub mass: f64,
}

/// Smallest most-probable prefix of `probs` whose mass reaches `p`.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<NucleusSet> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Argument(format!("nucleus p must be in (0, 1], got {p}")));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut kept = Vec::new();
    for t in order {
        kept.push(t);
        mass += probs[t];
        if mass >= p {
            break;
        }
    }
    let renorm = kept.iter().map(|&t| probs[t] / mass).collect();
    Ok(NucleusSet {
        tokens: kept,
        probs: renorm,
        mass,
    })
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Nucleus (top-p) sampling until the end-of-sequence id or `max_len`.
pub fn nucleus_sample<R: Rng + ?Sized>(
    params: &ModelParams,
    example: &PromptedExample,
    p: f64,
    rng: &mut R,
    max_len: usize,
) -> Result<Decoded> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Argument(format!("nucleus p must be in (0, 1], got {p}")));
    }
    let prefix = conditioning_prefix(example);
    check_vocab(&prefix, params.vocab_size(), "prompt/source")?;
    let mut history = prefix.clone();
    let mut logprob = 0.0;
    for _ in 0..max_len {
        let lp = params.next_log_probs(&history);
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let set = nucleus_filter(&probs, p)?;
        let t = set.tokens[sample_index(&set.probs, rng)];
        history.push(t as u32);
        logprob += lp[t];
        if t as u32 == EOS {
            break;
        }
    }
    let tokens = history[prefix.len()..].to_vec();
    let truncated = tokens.last() != Some(&EOS);
    Ok(Decoded {
        tokens: TokenSeq(tokens),
        logprob,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{ModelDims, ParamBlock};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example() -> PromptedExample {
        PromptedExample {
            source: TokenSeq(vec![4, 5]),
            target: TokenSeq(vec![1]),
            prompt_prefix: TokenSeq(vec![3]),
        }
    }

    fn random_model(v: usize, seed: u64, scale: f64) -> ModelParams {
        let dims = ModelDims {
            vocab_size: v,
            embed_dim: 3,
            hidden_dim: 6,
            window: 3,
        };
        let mut p = ModelParams::init(dims, seed);
        p.scale(scale);
        p
    }

    /// Model whose next token is `next(previous token)` with near certainty.
    fn successor_model(v: usize, next: impl Fn(usize) -> usize) -> ModelParams {
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
            p.block_mut(ParamBlock::OutputWeight)[next(prev) * v + prev] = 15.0;
        }
        // Hidden units sit at +-1; the bias cancels the inactive ones so the
        // forced token's logit is 30 and every other logit is 0.
        let w2 = p.block(ParamBlock::OutputWeight).to_vec();
        for n in 0..v {
            p.block_mut(ParamBlock::OutputBias)[n] = w2[n * v..(n + 1) * v].iter().sum();
        }
        p
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..20 {
            let p = random_model(6, seed, 15.0);
            let b = beam_search(&p, &example(), 1, 6).unwrap();
            let g = greedy_decode(&p, &example(), 6).unwrap();
            assert_eq!(b.tokens, g.tokens, "seed {seed}");
            assert_eq!(b.truncated, g.truncated);
        }
    }

    #[test]
    fn forced_model_emits_forced_sequence() {
        // SEP(2) -> 4 -> 5 -> 1(EOS)
        let next = |t: usize| match t {
            2 => 4,
            4 => 5,
            5 => 1,
            _ => 0,
        };
        let p = successor_model(6, next);
        for beam in [1, 2, 4, 8] {
            let d = beam_search(&p, &example(), beam, 10).unwrap();
            assert_eq!(d.tokens.0, vec![4, 5, 1], "beam {beam}");
            assert!(!d.truncated);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p_nuc in [0.5, 0.9, 1.0] {
            let d = nucleus_sample(&p, &example(), p_nuc, &mut rng, 10).unwrap();
            assert_eq!(d.tokens.0, vec![4, 5, 1]);
        }
    }

    #[test]
    fn truncated_when_nothing_finishes() {
        // Never emits EOS: 2 -> 4 -> 5 -> 4 -> ...
        let next = |t: usize| if t == 4 { 5 } else { 4 };
        let p = successor_model(6, next);
        let d = beam_search(&p, &example(), 2, 5).unwrap();
        assert!(d.truncated);
        assert_eq!(d.tokens.0, vec![4, 5, 4, 5, 4]);
        let g = greedy_decode(&p, &example(), 5).unwrap();
        assert!(g.truncated);
    }

    #[test]
    fn beam_rejects_zero_width() {
        let p = random_model(5, 0, 1.0);
        assert!(beam_search(&p, &example(), 0, 3).is_err());
    }

    #[test]
    fn nucleus_worked_example() {
        let set = nucleus_filter(&[0.5, 0.3, 0.15, 0.05], 0.9).unwrap();
        assert_eq!(set.tokens, vec![0, 1, 2]);
        let expected = [0.526316, 0.315789, 0.157895];
        for (a, b) in set.probs.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn nucleus_full_and_one_hot() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        let set = nucleus_filter(&probs, 1.0).unwrap();
        assert_eq!(set.tokens.len(), 4);
        let one_hot = nucleus_filter(&[0.0, 1.0, 0.0], 0.3).unwrap();
        assert_eq!(one_hot.tokens, vec![1]);
        assert_eq!(one_hot.probs, vec![1.0]);
        assert!(nucleus_filter(&probs, 0.0).is_err());
        assert!(nucleus_filter(&probs, 1.5).is_err());
    }

    #[test]
    fn nucleus_sampling_is_seeded() {
        let p = random_model(7, 4, 3.0);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5)
                .map(|_| nucleus_sample(&p, &example(), 0.9, &mut rng, 8).unwrap().tokens)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
    }
}
