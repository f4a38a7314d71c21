use proptest::prelude::*;

use pld_core::datagen::{oracle_quality, swap_pairs, TaskConfig, ToyTaskSpec};
use pld_core::evalkit::{k_selection, kendall_tau_b, ngram_bleu, pearson, KMode};
use pld_core::plmodel::{
    binary_pref_prob, choice_axiom_residual, compute_distances, pl_nll, pl_ranking_prob,
    pld_loss, DistanceMatrix,
};
use pld_core::prefcore::{
    sort_preference_set, Candidate, Method, PreferenceDataset, PreferenceSet, PromptedExample,
    TokenSeq,
};
use pld_core::seqmodel::{beam_search, nucleus_filter, ModelDims, ModelParams};
use pld_core::tokens::EOS;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn grid_score() -> impl Strategy<Value = f64> {
    (0u32..=25).prop_map(|k| 1.0 + 0.2 * k as f64)
}

fn method() -> impl Strategy<Value = Method> {
    prop_oneof![Just(Method::Reference), Just(Method::Beam), Just(Method::Nucleus)]
}

fn candidate() -> impl Strategy<Value = Candidate> {
    (
        proptest::collection::vec(4u32..10, 1..5),
        method(),
        grid_score(),
        grid_score(),
    )
        .prop_map(|(mut t, m, a, b)| {
            t.push(EOS);
            Candidate::scored(TokenSeq(t), m, [a, b]).unwrap()
        })
}

fn set_of(n: std::ops::Range<usize>) -> impl Strategy<Value = PreferenceSet> {
    proptest::collection::vec(candidate(), n).prop_map(|candidates| PreferenceSet {
        example: PromptedExample {
            source: TokenSeq(vec![4, 5]),
            target: TokenSeq(vec![5, 4, EOS]),
            prompt_prefix: TokenSeq(vec![3]),
        },
        candidates,
        oracle: None,
    })
}

/// Highest-scoring EOS-terminated sequence of at most `max_len` tokens, by
/// brute force; lexicographically smallest on ties.
fn exhaustive_best(params: &ModelParams, prefix: &[u32], max_len: usize) -> (Vec<u32>, f64) {
    let v = params.vocab_size() as u32;
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut frontier: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for (toks, score) in &frontier {
            let mut history = prefix.to_vec();
            history.extend_from_slice(toks);
            let lp = params.next_log_probs(&history);
            for t in 0..v {
                let mut seq = toks.clone();
                seq.push(t);
                let s = score + lp[t as usize];
                if t == EOS {
                    let replace = match &best {
                        None => true,
                        Some((bt, bs)) => s > *bs || (s == *bs && seq < *bt),
                    };
                    if replace {
                        best = Some((seq, s));
                    }
                } else {
                    next.push((seq, s));
                }
            }
        }
        frontier = next;
    }
    best.expect("EOS is always reachable")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranking_probs_sum_to_one(rewards in proptest::collection::vec(-5.0f64..5.0, 2..=5)) {
        let total: f64 = permutations(rewards.len())
            .iter()
            .map(|p| pl_ranking_prob(&rewards, p).unwrap())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unit_distances_reduce_to_plain_pl(ll in proptest::collection::vec(-30.0f64..0.0, 2..=5)) {
        let a = pld_loss(&ll, &DistanceMatrix::ones(ll.len())).unwrap();
        let b = pl_nll(&ll).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    #[test]
    fn two_candidates_match_binary_form(l1 in -20.0f64..0.0, l2 in -20.0f64..0.0, gap in 0.2f64..5.0) {
        let dm = compute_distances(&[gap + 1.0, 1.0]).unwrap();
        let loss = pld_loss(&[l1, l2], &dm).unwrap();
        let p = binary_pref_prob(l1, l2, gap).unwrap();
        prop_assert!((loss + p.ln()).abs() <= 1e-12 * loss.abs().max(1.0));
    }

    #[test]
    fn choice_axiom_holds_without_distances(ll in proptest::collection::vec(-30.0f64..0.0, 3)) {
        prop_assert_eq!(choice_axiom_residual(&ll, &DistanceMatrix::ones(3)).unwrap(), 0.0);
    }

    #[test]
    fn sorting_is_idempotent_and_a_permutation(set in set_of(2..6)) {
        let once = sort_preference_set(set.clone()).unwrap();
        prop_assert!(once.is_sorted());
        let twice = sort_preference_set(once.clone()).unwrap();
        prop_assert_eq!(&once, &twice);
        let mut a: Vec<String> = set.candidates.iter().map(|c| format!("{c:?}")).collect();
        let mut b: Vec<String> = once.candidates.iter().map(|c| format!("{c:?}")).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn k_selection_keeps_the_extremes(sets in proptest::collection::vec(set_of(5..6), 1..4), k in 2usize..=5) {
        let sets: Vec<_> = sets.into_iter().map(|s| sort_preference_set(s).unwrap()).collect();
        let ds = PreferenceDataset { sets, vocab_size: 10, metadata: Default::default() };
        let fwd = k_selection(&ds, KMode::Forward, k).unwrap();
        let rev = k_selection(&ds, KMode::Reverse, k).unwrap();
        for ((f, r), s) in fwd.sets.iter().zip(&rev.sets).zip(&ds.sets) {
            prop_assert_eq!(f.candidates.len(), k);
            prop_assert_eq!(r.candidates.len(), k);
            prop_assert_eq!(&f.candidates[..], &s.candidates[..k]);
            prop_assert_eq!(&r.candidates[0], &s.candidates[0]);
            prop_assert_eq!(r.candidates.last(), s.candidates.last());
            prop_assert!(r.is_sorted());
        }
        if k == 5 {
            prop_assert_eq!(&fwd, &rev);
        }
    }

    #[test]
    fn beam_matches_exhaustive_search(
        v in 3usize..=4,
        max_len in 1usize..=3,
        seed in 0u64..1000,
        scale in 0.5f64..20.0,
        src in proptest::collection::vec(0u32..4, 0..3),
    ) {
        let dims = ModelDims { vocab_size: v, embed_dim: 3, hidden_dim: 5, window: 3 };
        let mut params = ModelParams::init(dims, seed);
        params.scale(scale);
        let example = PromptedExample {
            source: TokenSeq(src.into_iter().map(|t| t % v as u32).collect()),
            target: TokenSeq(vec![EOS]),
            prompt_prefix: TokenSeq(vec![]),
        };
        let width = v.pow(max_len as u32);
        let beam = beam_search(&params, &example, width, max_len).unwrap();
        let mut prefix = example.source.0.clone();
        prefix.push(pld_core::tokens::SEP);
        let (tokens, score) = exhaustive_best(&params, &prefix, max_len);
        prop_assert!(!beam.truncated);
        prop_assert_eq!(beam.tokens.0, tokens);
        prop_assert!((beam.logprob - score).abs() < 1e-12);
    }

    #[test]
    fn nucleus_set_is_minimal(weights in proptest::collection::vec(0.0f64..1.0, 1..12), p in 0.05f64..=1.0) {
        let total: f64 = weights.iter().sum();
        prop_assume!(total > 0.0);
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let set = nucleus_filter(&probs, p).unwrap();
        let kept: f64 = set.tokens.iter().map(|&t| probs[t]).sum();
        // Rounding in the normalization can leave the full mass a hair below 1.
        prop_assert!(kept >= p || set.tokens.len() == probs.len());
        let without_last = kept - probs[*set.tokens.last().unwrap()];
        prop_assert!(without_last < p);
        let smallest_kept = set.tokens.iter().map(|&t| probs[t]).fold(f64::INFINITY, f64::min);
        for t in (0..probs.len()).filter(|t| !set.tokens.contains(t)) {
            prop_assert!(probs[t] <= smallest_kept);
        }
        prop_assert!((set.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_quality_is_a_symmetric_similarity(
        a in proptest::collection::vec(4u32..9, 0..7),
        b in proptest::collection::vec(4u32..9, 0..7),
    ) {
        let (ta, tb) = (TokenSeq(a.clone()), TokenSeq(b.clone()));
        let q = oracle_quality(&ta, &tb);
        prop_assert_eq!(q, oracle_quality(&tb, &ta));
        prop_assert!((0.0..=1.0).contains(&q));
        prop_assert_eq!(q == 1.0, a == b);
        let mut with_eos = a.clone();
        with_eos.push(EOS);
        prop_assert_eq!(oracle_quality(&TokenSeq(with_eos), &tb), q);
    }

    #[test]
    fn bleu_ignores_sentence_order(
        pairs in proptest::collection::vec(
            (proptest::collection::vec(4u32..8, 0..6), proptest::collection::vec(4u32..8, 1..6)),
            1..6,
        ),
        rotate in 0usize..6,
    ) {
        let (c, r): (Vec<TokenSeq>, Vec<TokenSeq>) =
            pairs.iter().map(|(c, r)| (TokenSeq(c.clone()), TokenSeq(r.clone()))).unzip();
        let base = ngram_bleu(&c, &r).unwrap();
        let k = rotate % c.len();
        let (mut c2, mut r2) = (c.clone(), r.clone());
        c2.rotate_left(k);
        r2.rotate_left(k);
        let moved = ngram_bleu(&c2, &r2).unwrap();
        prop_assert!((base - moved).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
        prop_assert!((ngram_bleu(&r, &r).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gold_transform_inverts(seed in 0u64..50, src in proptest::collection::vec(4u32..14, 1..8)) {
        let task = ToyTaskSpec::new(&TaskConfig { vocab_size: 14, min_len: 1, max_len: 8, noise_rate: 0.0, task_seed: seed }).unwrap();
        let gold = task.gold(&src);
        prop_assert_eq!(task.invert(&gold).0, src.clone());
        let mut twice = src.clone();
        swap_pairs(&mut twice);
        swap_pairs(&mut twice);
        prop_assert_eq!(twice, src);
    }

    #[test]
    fn correlations_are_bounded_and_symmetric(
        xy in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..8),
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        if let Some(r) = pearson(&x, &y) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            prop_assert!((r - pearson(&y, &x).unwrap()).abs() < 1e-12);
        }
        if let Some(t) = kendall_tau_b(&x, &y) {
            prop_assert!((-1.0..=1.0).contains(&t));
            prop_assert_eq!(Some(t), kendall_tau_b(&y, &x));
        }
        prop_assert!((pearson(&x, &x).map_or(1.0, |r| r) - 1.0).abs() < 1e-12);
    }
}
