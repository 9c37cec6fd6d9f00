//! Streaming out-of-distribution detection with test-time activated
//! negative labels.
//!
//! The crate operates on precomputed, L2-normalized vision-language
//! embeddings. It maintains confidence-gated memories of recent positive
//! and negative test samples, measures how strongly every corpus label is
//! activated by each memory, re-mines the negative label set once per
//! batch, and scores samples with a rank-aware prefix-averaged softmax.
//!
//! The crate is `no_std` (with `alloc`). The `std` feature, on by default,
//! enables runtime CPU dispatch in the matrix kernels; `parallel` spreads
//! per-sample work inside a batch over a rayon pool.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod activation;
pub mod detector;
pub mod embedding;
mod error;
mod math;
pub mod memory;
pub mod metrics;
pub mod miner;
pub mod scoring;
pub mod similarity;
pub mod synth;
pub mod threshold;

pub use activation::{ActivationSource, ActivationVector, BlendWeight};
pub use detector::{run_baseline, run_stream, Detector, DetectorConfig, ScoreRecord, ScoreVariant};
pub use embedding::{Bundle, Domain, EmbeddingMatrix, LabelBank, TestStream};
pub use error::{Error, Result};
pub use memory::{ActivationQueue, GateConfig, ScoreHistory};
pub use metrics::EvalReport;
pub use miner::{MinedLabels, MiningVariant};
pub use scoring::ScoreContext;
pub use similarity::Temperature;
pub use threshold::{Decision, GammaEstimate, GammaPolicy};
