//! Conditional normalizing flows for nonlinear state estimation.

// `!(x > y)` is used on purpose so NaN fails the check; tape arithmetic
// returns `Result` and cannot implement the operator traits.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait, clippy::large_enum_variant)]

pub mod diffcore;
pub mod dynamics;
pub mod encoders;
pub mod error;
pub mod flow;
pub mod inference;
pub mod io;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, ModelSpec};
