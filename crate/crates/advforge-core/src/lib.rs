//! Adversarial-example toolkit core.
//!
//! A small, self-contained stack for studying gradient-sign attacks and
//! defenses on image classifiers:
//!
//! * [`nn`] — a minimal differentiable layer engine (conv / pool / dense /
//!   relu / softmax) with exact reverse-mode gradients for both parameters
//!   and inputs, f64 throughout.
//! * [`attacks`] — FGSM, IFGSM and PGD white-box attack generators.
//! * [`defense`] — the four training regimes: natural, FGSM / IFGSM
//!   adversarial training, and the two-step defense that pairs each
//!   FGSM point with a categorical-dissimilarity step.
//! * [`data`] — MNIST IDX ingestion, seeded subsetting and batching.
//! * [`eval`] — accuracy matrices (white-box and transfer) and loss-surface
//!   grids as CSV-friendly tables.
//!
//! Everything is deterministic given the seeds in the relevant configs:
//! repeated runs produce byte-identical weight files and CSVs.

pub mod attacks;
pub mod blas;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
