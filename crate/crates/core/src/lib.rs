//! Online prototype memory with self-supervised representation learning.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoder;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod numerics;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod streams;
pub mod trainer;

pub use error::{Error, Result};
