//! Distance-weighted Plackett-Luce preference learning for sequence generation.
//!
//! The crate is organised bottom-up:
//!
//! - [`prefcore`]: token sequences, scored candidates, preference sets and
//!   their line-delimited JSON format.
//! - [`plmodel`]: ranking mathematics (Plackett-Luce probabilities, the
//!   distance-weighted listwise loss and its gradient, Gumbel sampling,
//!   reward MLE, the choice-axiom residual).
//! - [`seqmodel`]: a small fixed-window autoregressive model with exact
//!   gradients, beam search and nucleus sampling.
//! - [`trainer`]: SFT and preference stages sharing one Adam optimizer and
//!   learning-rate schedule.
//! - [`datagen`]: the synthetic translation task, candidate generation,
//!   simulated annotation and hard-example selection.
//! - [`evalkit`]: quality metrics, calibration and the analysis experiments.
//! - [`pipeline`]: the end-to-end two-stage run used by the CLI.

pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod parallel;
pub mod pipeline;
pub mod plmodel;
pub mod prefcore;
pub mod seqmodel;
pub mod trainer;

pub use error::{Error, Result};

/// Reserved token ids shared by the task and the model.
pub mod tokens {
    pub const PAD: u32 = 0;
    pub const EOS: u32 = 1;
    pub const SEP: u32 = 2;
    /// First id of the prompt-prefix range.
    pub const PROMPT_BASE: u32 = 3;
}
