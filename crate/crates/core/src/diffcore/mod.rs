//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates gradients into a [`ParamSet`].

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_entries};
pub use params::{ParamId, ParamSet};
pub use tape::{concat, selective_scan, Elementwise, Gradients, NodeId, Reduction, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::zoh_phi;


#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("invalid shape {shape:?}: extents must be positive and rank >= 1")]
    InvalidShape { shape: Vec<usize> },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("rows have unequal lengths")]
    Ragged,

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error in {op}: entry {index} = {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("axis {axis} invalid for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("{op}: index {index} out of range for extent {extent}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("softmax row {row} is fully masked")]
    FullyMasked { row: usize },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("binary operation is missing its second operand")]
    MissingOperand,

    #[error("non-finite state in {op}")]
    NonFinite { op: &'static str },

    #[error("finite-difference step {h} outside [1e-6, 1e-3]")]
    InvalidStep { h: f64 },
}
