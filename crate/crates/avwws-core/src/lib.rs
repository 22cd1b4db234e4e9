//! Audio-visual wake word spotting.
//!
//! End-to-end pipeline: differentiable tensor kernels, FBank audio features,
//! a seeded synthetic audio-visual corpus, frame-level cross-modal attention
//! encoders (transformer and conformer variants with early/late fusion
//! baselines), training with uni-modal pretraining and transfer, and a
//! detection-metrics evaluation harness (FRR/FAR/WWS/AUC, attention rollout).

pub mod ablation;
pub mod audio;
pub mod ckpt;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod runtime;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
