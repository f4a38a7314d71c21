//! The sequence model: a fixed-window neural language model.
//!
//! Each next-token distribution is computed from the last `window` tokens of
//! the concatenated sequence `prompt_prefix ++ source ++ [SEP] ++ target`:
//! their embeddings are concatenated, passed through one tanh hidden layer
//! and projected to vocabulary logits. Contexts shorter than the window are
//! left-padded with the pad id, whose embedding is trained like any other.
//!
//! Only target positions are scored; prompt, source and separator positions
//! are masked out of the likelihood. Gradients are exact and hand-derived.

mod checkpoint;
mod decode;
mod gradcheck;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{beam_search, greedy_decode, nucleus_filter, nucleus_sample, Decoded, NucleusSet};
pub use gradcheck::{grad_check, LossKind};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefcore::{PromptedExample, TokenSeq};
use crate::tokens;

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_HIDDEN_DIM: usize = 64;
pub const DEFAULT_WINDOW: usize = 8;
pub const INIT_RANGE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub window: usize,
}

impl ModelDims {
    pub fn new(vocab_size: usize) -> Self {
        ModelDims {
            vocab_size,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            window: DEFAULT_WINDOW,
        }
    }

    fn input_dim(&self) -> usize {
        self.window * self.embed_dim
    }

    /// Sizes of the parameter blocks in storage order.
    fn block_sizes(&self) -> [usize; 5] {
        let (v, h) = (self.vocab_size, self.hidden_dim);
        [v * self.embed_dim, h * self.input_dim(), h, v * h, v]
    }

    pub fn param_count(&self) -> usize {
        self.block_sizes().iter().sum()
    }
}

/// Parameter blocks, in storage and checkpoint order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamBlock {
    Embedding,
    HiddenWeight,
    HiddenBias,
    OutputWeight,
    OutputBias,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 5] = [
        ParamBlock::Embedding,
        ParamBlock::HiddenWeight,
        ParamBlock::HiddenBias,
        ParamBlock::OutputWeight,
        ParamBlock::OutputBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamBlock::Embedding => "embedding",
            ParamBlock::HiddenWeight => "hidden.weight",
            ParamBlock::HiddenBias => "hidden.bias",
            ParamBlock::OutputWeight => "output.weight",
            ParamBlock::OutputBias => "output.bias",
        }
    }
}

/// Model parameters stored flat: embeddings (vocab x embed, row-major),
/// hidden weights (hidden x window*embed), hidden biases, output weights
/// (vocab x hidden), output biases.
///
/// Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        ModelParams {
            dims,
            data: vec![0.0; dims.param_count()],
        }
    }

    /// Uniform initialization in `[-INIT_RANGE, INIT_RANGE]`.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.param_count())
            .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        ModelParams { dims, data }
    }

    pub fn from_vec(dims: ModelDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.param_count() {
            return Err(Error::Argument(format!(
                "expected {} parameters, got {}",
                dims.param_count(),
                data.len()
            )));
        }
        Ok(ModelParams { dims, data })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn vocab_size(&self) -> usize {
        self.dims.vocab_size
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn block_range(&self, block: ParamBlock) -> std::ops::Range<usize> {
        let sizes = self.dims.block_sizes();
        let idx = block as usize;
        let start: usize = sizes[..idx].iter().sum();
        start..start + sizes[idx]
    }

    pub fn block(&self, block: ParamBlock) -> &[f64] {
        &self.data[self.block_range(block)]
    }

    pub fn block_mut(&mut self, block: ParamBlock) -> &mut [f64] {
        let r = self.block_range(block);
        &mut self.data[r]
    }

    /// Block and offset within it for a flat index.
    pub fn locate(&self, index: usize) -> (ParamBlock, usize) {
        let mut start = 0;
        for (block, size) in ParamBlock::ALL.iter().zip(self.dims.block_sizes()) {
            if index < start + size {
                return (*block, index - start);
            }
            start += size;
        }
        panic!("parameter index {index} out of range");
    }

    /// First non-finite entry, reported as an error naming its block.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(i) => {
                let (block, index) = self.locate(i);
                Err(Error::NonFinite {
                    block: block.name(),
                    index,
                })
            }
            None => Ok(()),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = 0.0);
    }

    /// Log-probabilities of the next token given the preceding tokens.
    pub fn next_log_probs(&self, history: &[u32]) -> Vec<f64> {
        let ctx = window_of(history, self.dims.window);
        let mut hidden = vec![0.0; self.dims.hidden_dim];
        let mut logits = vec![0.0; self.dims.vocab_size];
        self.step_forward(&ctx, &mut hidden, &mut logits);
        log_softmax_in_place(&mut logits);
        logits
    }

    fn step_forward(&self, ctx: &[u32], hidden: &mut [f64], logits: &mut [f64]) {
        let d = self.dims;
        let emb = self.block(ParamBlock::Embedding);
        let w1 = self.block(ParamBlock::HiddenWeight);
        let b1 = self.block(ParamBlock::HiddenBias);
        let w2 = self.block(ParamBlock::OutputWeight);
        let b2 = self.block(ParamBlock::OutputBias);
        let e = d.embed_dim;
        let n_in = d.input_dim();

        let mut x = vec![0.0; n_in];
        for (k, &t) in ctx.iter().enumerate() {
            let t = t as usize;
            x[k * e..(k + 1) * e].copy_from_slice(&emb[t * e..(t + 1) * e]);
        }
        for (h, out) in hidden.iter_mut().enumerate() {
            let row = &w1[h * n_in..(h + 1) * n_in];
            *out = (b1[h] + dot(row, &x)).tanh();
        }
        for (v, out) in logits.iter_mut().enumerate() {
            let row = &w2[v * d.hidden_dim..(v + 1) * d.hidden_dim];
            *out = b2[v] + dot(row, hidden);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_softmax_in_place(z: &mut [f64]) {
    let lse = crate::plmodel::log_sum_exp(z);
    z.iter_mut().for_each(|x| *x -= lse);
}

/// Last `window` tokens of `history`, left-padded with the pad id.
fn window_of(history: &[u32], window: usize) -> Vec<u32> {
    let start = history.len().saturating_sub(window);
    let mut ctx = vec![tokens::PAD; window - (history.len() - start)];
    ctx.extend_from_slice(&history[start..]);
    ctx
}

/// `prompt_prefix ++ source ++ [SEP]`: everything the target conditions on.
pub fn conditioning_prefix(example: &PromptedExample) -> Vec<u32> {
    let mut seq =
        Vec::with_capacity(example.prompt_prefix.len() + example.source.len() + 1);
    seq.extend_from_slice(example.prompt_prefix.as_slice());
    seq.extend_from_slice(example.source.as_slice());
    seq.push(tokens::SEP);
    seq
}

/// Per-position loss mask over `prompt_prefix ++ source ++ [SEP] ++ target`:
/// true exactly on target positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossMask(pub Vec<bool>);

impl LossMask {
    pub fn for_target(example: &PromptedExample, target: &TokenSeq) -> Self {
        let prefix = example.prompt_prefix.len() + example.source.len() + 1;
        let mut mask = vec![false; prefix];
        mask.resize(prefix + target.len(), true);
        LossMask(mask)
    }
}

/// Activations retained from a forward pass, one entry per scored position.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    contexts: Vec<u32>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
    labels: Vec<u32>,
}

impl ForwardCache {
    pub fn positions(&self) -> usize {
        self.labels.len()
    }

    /// Output distribution at scored position `i`.
    pub fn distribution(&self, i: usize) -> &[f64] {
        let v = self.probs.len() / self.labels.len().max(1);
        &self.probs[i * v..(i + 1) * v]
    }
}

fn check_vocab(seq: &[u32], vocab_size: usize, what: &str) -> Result<()> {
    match seq.iter().find(|&&t| t as usize >= vocab_size) {
        Some(t) => Err(Error::Argument(format!(
            "{what} token id {t} out of range for vocabulary of {vocab_size}"
        ))),
        None => Ok(()),
    }
}

/// Sum of `log P(seq[p] | seq[..p])` over positions where the mask is set.
pub fn masked_logprob(
    params: &ModelParams,
    seq: &[u32],
    mask: &LossMask,
) -> Result<(f64, ForwardCache)> {
    let d = params.dims;
    check_vocab(seq, d.vocab_size, "sequence")?;
    if mask.0.len() != seq.len() {
        return Err(Error::Argument(format!(
            "mask length {} does not match sequence length {}",
            mask.0.len(),
            seq.len()
        )));
    }
    let scored = mask.0.iter().filter(|&&m| m).count();
    let mut cache = ForwardCache {
        contexts: Vec::with_capacity(scored * d.window),
        hidden: vec![0.0; scored * d.hidden_dim],
        probs: vec![0.0; scored * d.vocab_size],
        labels: Vec::with_capacity(scored),
    };
    let mut total = 0.0;
    let mut i = 0;
    for (p, &m) in mask.0.iter().enumerate() {
        if !m {
            continue;
        }
        let ctx = window_of(&seq[..p], d.window);
        let hidden = &mut cache.hidden[i * d.hidden_dim..(i + 1) * d.hidden_dim];
        let probs = &mut cache.probs[i * d.vocab_size..(i + 1) * d.vocab_size];
        params.step_forward(&ctx, hidden, probs);
        log_softmax_in_place(probs);
        let label = seq[p];
        total += probs[label as usize];
        probs.iter_mut().for_each(|x| *x = x.exp());
        cache.contexts.extend_from_slice(&ctx);
        cache.labels.push(label);
        i += 1;
    }
    Ok((total, cache))
}

/// Log-likelihood of `candidate` as the target for `example`, scoring target
/// positions only. A trailing end-of-sequence id, when present, is scored.
pub fn sequence_logprob(
    params: &ModelParams,
    example: &PromptedExample,
    candidate: &TokenSeq,
) -> Result<(f64, ForwardCache)> {
    let mut seq = conditioning_prefix(example);
    seq.extend_from_slice(candidate.as_slice());
    let mask = LossMask::for_target(example, candidate);
    masked_logprob(params, &seq, &mask)
}

/// Accumulates `scale * d(log-likelihood)/d(params)` into `grad`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, scale: f64, grad: &mut ModelParams) {
    let d = params.dims;
    let (e, hd, v) = (d.embed_dim, d.hidden_dim, d.vocab_size);
    let n_in = d.input_dim();
    let emb = params.block(ParamBlock::Embedding);
    let w1 = params.block(ParamBlock::HiddenWeight);
    let w2 = params.block(ParamBlock::OutputWeight);

    let ranges: Vec<_> = ParamBlock::ALL.iter().map(|b| grad.block_range(*b)).collect();
    let g = grad.as_mut_slice();
    let (g_emb, rest) = g.split_at_mut(ranges[1].start);
    let (g_w1, rest) = rest.split_at_mut(ranges[2].start - ranges[1].start);
    let (g_b1, rest) = rest.split_at_mut(ranges[3].start - ranges[2].start);
    let (g_w2, g_b2) = rest.split_at_mut(ranges[4].start - ranges[3].start);

    let mut dz = vec![0.0; v];
    let mut dh = vec![0.0; hd];
    let mut x = vec![0.0; n_in];
    let mut dx = vec![0.0; n_in];
    for i in 0..cache.positions() {
        let ctx = &cache.contexts[i * d.window..(i + 1) * d.window];
        let hidden = &cache.hidden[i * hd..(i + 1) * hd];
        let probs = &cache.probs[i * v..(i + 1) * v];
        let label = cache.labels[i] as usize;

        // d log p_label / d logits = onehot(label) - p
        for (k, dzk) in dz.iter_mut().enumerate() {
            *dzk = -scale * probs[k];
        }
        dz[label] += scale;

        dh.iter_mut().for_each(|x| *x = 0.0);
        for (k, &dzk) in dz.iter().enumerate() {
            g_b2[k] += dzk;
            let row = &w2[k * hd..(k + 1) * hd];
            let grow = &mut g_w2[k * hd..(k + 1) * hd];
            for j in 0..hd {
                grow[j] += dzk * hidden[j];
                dh[j] += dzk * row[j];
            }
        }

        for (k, &t) in ctx.iter().enumerate() {
            let t = t as usize;
            x[k * e..(k + 1) * e].copy_from_slice(&emb[t * e..(t + 1) * e]);
        }
        dx.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..hd {
            let da = dh[j] * (1.0 - hidden[j] * hidden[j]);
            if da == 0.0 {
                continue;
            }
            g_b1[j] += da;
            let row = &w1[j * n_in..(j + 1) * n_in];
            let grow = &mut g_w1[j * n_in..(j + 1) * n_in];
            for q in 0..n_in {
                grow[q] += da * x[q];
                dx[q] += da * row[q];
            }
        }
        for (k, &t) in ctx.iter().enumerate() {
            let t = t as usize;
            let grow = &mut g_emb[t * e..(t + 1) * e];
            for (a, b) in grow.iter_mut().zip(&dx[k * e..(k + 1) * e]) {
                *a += b;
            }
        }
    }
}

/// Token-level imitation loss `-log pi(target | prompt, source)` and its
/// gradient.
pub fn sft_loss_grad(
    params: &ModelParams,
    example: &PromptedExample,
    candidate: &TokenSeq,
) -> Result<(f64, ModelParams)> {
    let (ll, cache) = sequence_logprob(params, example, candidate)?;
    let mut grad = ModelParams::zeros(params.dims);
    backward(params, &cache, -1.0, &mut grad);
    Ok((-ll, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(prompt: Vec<u32>, source: Vec<u32>, target: Vec<u32>) -> PromptedExample {
        PromptedExample {
            source: TokenSeq(source),
            target: TokenSeq(target),
            prompt_prefix: TokenSeq(prompt),
        }
    }

    fn small_dims(v: usize) -> ModelDims {
        ModelDims {
            vocab_size: v,
            embed_dim: 3,
            hidden_dim: 5,
            window: 4,
        }
    }

    #[test]
    fn zero_params_give_uniform_likelihood() {
        let params = ModelParams::zeros(ModelDims::new(11));
        let ex = example(vec![3], vec![5, 6, 7], vec![8, 9, 1]);
        let (ll, cache) = sequence_logprob(&params, &ex, &ex.target).unwrap();
        assert_eq!(ll, -3.0 * (11f64).ln());
        assert_eq!(cache.positions(), 3);
    }

    #[test]
    fn hand_built_confident_model() {
        // Vocabulary 4, window 1, one-hot embeddings and saturated tanh units
        // so that the logits are exactly +10 for the successor of the
        // previous token and -10 elsewhere.
        let dims = ModelDims {
            vocab_size: 4,
            embed_dim: 4,
            hidden_dim: 4,
            window: 1,
        };
        let mut p = ModelParams::zeros(dims);
        {
            let emb = p.block_mut(ParamBlock::Embedding);
            for t in 0..4 {
                emb[t * 4 + t] = 1.0;
            }
        }
        {
            // Saturate hidden unit t when token t is in context.
            let w1 = p.block_mut(ParamBlock::HiddenWeight);
            for t in 0..4 {
                w1[t * 4 + t] = 50.0;
            }
        }
        {
            let b1 = p.block_mut(ParamBlock::HiddenBias);
            b1.iter_mut().for_each(|b| *b = -25.0);
        }
        let succ = |t: usize| (t + 1) % 4;
        {
            // tanh(25) and tanh(-25) are both exactly +-1 in f64.
            let w2 = p.block_mut(ParamBlock::OutputWeight);
            for prev in 0..4 {
                for next in 0..4 {
                    w2[next * 4 + prev] = if next == succ(prev) { 5.0 } else { -5.0 };
                }
            }
        }
        {
            // Cancel the three inactive units (each at -1); logits become
            // 2 * w2[next][prev] = +-10.
            let w2: Vec<f64> = p.block(ParamBlock::OutputWeight).to_vec();
            let b2 = p.block_mut(ParamBlock::OutputBias);
            for next in 0..4 {
                b2[next] = (0..4).map(|h| w2[next * 4 + h]).sum::<f64>();
            }
        }
        let logits_for = |prev: u32| {
            let lp = p.next_log_probs(&[prev]);
            lp.iter().map(|x| x.exp()).collect::<Vec<_>>()
        };
        // Logits are exactly +10 / -10 after the bias correction.
        let probs = logits_for(2);
        let expected_top = 1.0 / (1.0 + 3.0 * (-20f64).exp());
        assert!((probs[3] - expected_top).abs() < 1e-15);

        // Source [3], separator 2: target continues the successor chain
        // from SEP = 2: 3, 0, 1.
        let ex = example(vec![], vec![3], vec![3, 0, 1]);
        let (ll, _) = sequence_logprob(&p, &ex, &ex.target).unwrap();
        let expected = -3.0 * (3.0 * (-20f64).exp()).ln_1p();
        assert!((ll - expected).abs() < 1e-15, "{ll} vs {expected}");
        assert!(ll < 0.0 && ll > -2e-8);
    }

    #[test]
    fn distributions_normalize() {
        let p = ModelParams::init(small_dims(9), 3);
        let mut big = p.clone();
        big.scale(40.0);
        for params in [&p, &big] {
            let ex = example(vec![3], vec![5, 6, 7, 8], vec![8, 4, 5, 1]);
            let (_, cache) = sequence_logprob(params, &ex, &ex.target).unwrap();
            for i in 0..cache.positions() {
                let s: f64 = cache.distribution(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "{s}");
            }
        }
    }

    #[test]
    fn masked_prompt_labels_do_not_matter() {
        let p = ModelParams::init(small_dims(9), 5);
        // Window 4: with a long prompt the first prompt token never reaches
        // a target context.
        let a = example(vec![3, 4, 4, 4, 4, 4], vec![5, 6], vec![7, 8, 1]);
        let mut b = a.clone();
        b.prompt_prefix.0[0] = 6;
        let (la, _) = sequence_logprob(&p, &a, &a.target).unwrap();
        let (lb, _) = sequence_logprob(&p, &b, &b.target).unwrap();
        assert_eq!(la, lb);

        // The explicit mask reproduces the target-only sum.
        let mut seq = conditioning_prefix(&a);
        seq.extend_from_slice(a.target.as_slice());
        let mask = LossMask::for_target(&a, &a.target);
        assert_eq!(mask.0.iter().filter(|m| **m).count(), 3);
        assert!(mask.0[..9].iter().all(|m| !m));
        let (lm, _) = masked_logprob(&p, &seq, &mask).unwrap();
        assert_eq!(lm, la);
    }

    #[test]
    fn out_of_vocab_is_an_argument_error() {
        let p = ModelParams::zeros(small_dims(9));
        let ex = example(vec![3], vec![5, 6], vec![7, 1]);
        assert!(matches!(
            sequence_logprob(&p, &ex, &TokenSeq(vec![9, 1])),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_params_sft_gradient() {
        let p = ModelParams::zeros(small_dims(9));
        let ex = example(vec![3], vec![5, 6], vec![7, 8, 1]);
        let (loss, g) = sft_loss_grad(&p, &ex, &ex.target).unwrap();
        assert_eq!(loss, 3.0 * 9f64.ln());
        // With all-zero weights nothing reaches the embeddings.
        assert!(g.block(ParamBlock::Embedding).iter().all(|x| *x == 0.0));
        assert!(g.block(ParamBlock::OutputBias).iter().any(|x| *x != 0.0));
    }

    #[test]
    fn unused_token_rows_have_zero_gradient() {
        let p = ModelParams::init(small_dims(12), 9);
        let ex = example(vec![3], vec![5, 6], vec![7, 8, 1]);
        let (_, g) = sft_loss_grad(&p, &ex, &ex.target).unwrap();
        let e = g.dims().embed_dim;
        let emb = g.block(ParamBlock::Embedding);
        for t in [4usize, 9, 10, 11] {
            assert!(emb[t * e..(t + 1) * e].iter().all(|x| *x == 0.0), "row {t}");
        }
        assert!(emb[5 * e..6 * e].iter().any(|x| *x != 0.0));
    }

    #[test]
    fn duplicated_example_doubles_gradient() {
        let p = ModelParams::init(small_dims(9), 2);
        let ex = example(vec![3], vec![5, 6], vec![7, 8, 1]);
        let (_, g1) = sft_loss_grad(&p, &ex, &ex.target).unwrap();
        let mut batch = ModelParams::zeros(p.dims());
        for _ in 0..2 {
            let (_, g) = sft_loss_grad(&p, &ex, &ex.target).unwrap();
            batch.add_scaled(&g, 1.0);
        }
        for (a, b) in batch.as_slice().iter().zip(g1.as_slice()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn locate_and_check_finite_name_blocks() {
        let mut p = ModelParams::zeros(small_dims(9));
        let idx = p.block_range(ParamBlock::HiddenBias).start + 2;
        assert_eq!(p.locate(idx), (ParamBlock::HiddenBias, 2));
        p.as_mut_slice()[idx] = f64::NAN;
        let err = p.check_finite().unwrap_err().to_string();
        assert!(err.contains("hidden.bias"), "{err}");
    }

    #[test]
    fn window_pads_on_the_left() {
        assert_eq!(window_of(&[5, 6], 4), vec![0, 0, 5, 6]);
        assert_eq!(window_of(&[1, 2, 3, 4, 5], 3), vec![3, 4, 5]);
    }
}
