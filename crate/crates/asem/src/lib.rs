//! Domain-invariant speaker embeddings trained with an adversarial domain
//! game, plus the verification tooling (cosine scoring, EER, score fusion)
//! and a synthetic domain-shifted corpus generator to measure it all with.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`tensor`] / [`graph`] / [`optim`]: a small reverse-mode autodiff
//!   engine over dense f64 tensors with SGD and RMSprop.
//! - [`network`]: the three players — embedding extractor (generator),
//!   cosine classifier head, and domain discriminator.
//! - [`losses`]: additive-margin softmax and the adversarial objectives
//!   (standard, least-squares, relativistic, gradient-reversal; optional
//!   auxiliary speaker classifier).
//! - [`trainer`]: chunk sampling, pretraining, and the three-step
//!   adversarial update with validation-based stopping.
//! - [`synthdata`]: seeded domain-shifted corpus generation.
//! - [`eval`]: embedding extraction, trial scoring, EER, fusion, and the
//!   domain probe diagnostic.
//! - [`config`] / [`cli`]: run configuration files and the `asem` binary.
//!
//! Each major capability has a runnable example under `examples/`:
//!
//! ```text
//! cargo run -p asem --example autodiff_basics
//! cargo run -p asem --example synth_corpus
//! cargo run -p asem --example pretrain_embeddings
//! cargo run -p asem --example adversarial_training
//! cargo run -p asem --example scoring_and_eer
//! cargo run -p asem --example score_fusion
//! ```

pub mod config;
pub mod error;
pub mod eval;
mod fileio;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod network;
pub mod optim;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub mod cli;

pub use error::{Error, Result};
pub use tensor::Tensor;
