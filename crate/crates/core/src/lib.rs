//! Conditional normalizing-flow enhancer for blurry super-resolved maps.
//!
//! The crate is `no_std` (with `alloc`) and contains every numerical piece:
//! tensors with reverse-mode differentiation, centered k-space operators,
//! the invertible flow layers, the condition encoder with its learnable
//! Gaussian base, the enhancer model, losses and metrics, the synthetic
//! phantom pipeline and the Adam training loop. File formats, the CLI and
//! all IO live in the `flowlens` crate.
#![no_std]
// `!(x > 0)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod condition;
mod error;
pub mod flow;
pub mod kspace;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
mod real;
pub mod rng;
pub mod synth;
mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use condition::{BaseDistribution, Condition};
pub use error::{Error, Result};
pub use model::{EnhancerModel, ModelConfig};
pub use params::{Binding, ParamId, ParamStore};
pub use real::{Precision, Real};
pub use rng::Rng;
pub use tensor::Tensor;
