//! Command-line surface for protostream: run configuration and profiles,
//! checkpoints, and the gen/train/eval/gradcheck/sweep commands.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, Result};
