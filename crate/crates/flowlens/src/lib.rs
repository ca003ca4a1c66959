//! File formats, datasets, configuration and the command-line front end for
//! the flowlens enhancer.

// `!(x >= 0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fmap;
pub mod fsutil;
pub mod pgm;
pub mod selftest;

pub use error::{CliError, Result};
