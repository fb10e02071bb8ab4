//! Noise-robust deep Hawkes process toolkit.
//!
//! Everything needed to study next-event prediction under corrupted event
//! logs, end to end and with known ground truth:
//!
//! - [`dataset`] — event sequences, JSONL persistence, deterministic splits.
//! - [`hawkes`] — classical multivariate Hawkes process: analytic intensity,
//!   exact simulation by thinning, and the point-process log-likelihood used
//!   as a test oracle.
//! - [`noise`] — controlled corruption of marks (stochastic matrices) and
//!   timestamps (additive Gaussian).
//! - [`tensor`] — a small dense tensor with reverse-mode autodiff and an
//!   adaptive-moment optimizer.
//! - [`model`] — the attention-based intensity model and its prediction heads.
//! - [`losses`] — the robust losses: generalized cross-entropy, per-sample
//!   overparameterized absolute-error time loss, and the loss re-weighting net.
//! - [`train`] — the staged training loop, checkpointing, and inference.
//! - [`metrics`] — macro F1, RMSE, and intensity-trace divergence diagnostics.
//!
//! All randomness flows through [`rng`]: ChaCha8, a named counter-based
//! generator, seeded per purpose so runs are reproducible and independent
//! streams can be derived for parallel work.

pub mod dataset;
pub mod error;
pub mod hashing;
pub mod hawkes;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
