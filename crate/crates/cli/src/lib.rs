//! Config-driven experiment pipeline around `hetpref-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod files;

pub use config::Config;
pub use error::CliError;
