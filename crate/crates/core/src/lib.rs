//! Preference alignment under latent annotator heterogeneity.
//!
//! Annotators belong to unobserved types, each with its own linear reward
//! over response features. This crate simulates such populations, fits one
//! policy per type with EM-DPO, aggregates the per-type policies into a
//! single min-max regret policy, and checks when types are identifiable
//! from binary versus multi-item comparisons.

// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod emdpo;
pub mod error;
pub mod evaluate;
pub mod exec;
pub mod identify;
pub mod kmeans;
pub mod policy;
pub mod rewards;
pub mod simulate;

pub use error::{Error, Result};
