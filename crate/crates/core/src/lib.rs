//! Monte Carlo and exact tools for transfer operators on configuration spaces.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chains;
pub mod coupling;
pub mod error;
pub mod limits;
pub mod observable;
pub mod oracle;
pub mod potential;
pub mod rng;
pub mod space;
pub mod stats;
pub mod systems;
pub mod transfer;

pub use error::{LabError, Result};
