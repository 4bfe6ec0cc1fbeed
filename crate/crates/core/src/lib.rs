//! Adversarial error bounds for unsupervised cross-domain mappings.
//!
//! A mapping `G1: A -> B` trained without paired samples cannot be validated
//! directly. This crate estimates its ground-truth error by training a second
//! low-discrepancy mapping `G2` that is pushed as far from `G1` as the
//! discrepancy constraint allows; the risk between the two upper-bounds the
//! risk of `G1` against the unknown target whenever the target is among the
//! simplest distribution-preserving maps.
//!
//! Module map:
//!
//! - [`nn`]: dense MLPs, reverse-mode gradients, optimizers, gradient checks.
//! - [`domains`]: synthetic domain pairs with known targets, CSV ingestion, risks.
//! - [`discrepancy`]: critic-based discrepancy estimates and a sliced W1 surrogate.
//! - [`mapping`]: adversarial training of `G1` (plain, cycle, distance regimes).
//! - [`bound`]: the witness `G2`, stopping criterion, model selection,
//!   per-sample bounds, trade-off calibration and the finite-pool oracle.
//! - [`hyperband`]: successive halving driven by the bound, with a resumable model store.
//! - [`stats`]: Pearson correlation with two-sided p-values, regret.
//! - [`report`]: CSV, JSON and SVG emission.

pub mod bound;
pub mod discrepancy;
pub mod domains;
pub mod error;
pub mod hyperband;
pub mod mapping;
pub mod nn;
pub mod parallel;
pub mod report;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
