//! Self-contained f64 numerics: a counter-based RNG, dense tensors, a
//! reverse-mode autodiff tape with the handful of primitives the sequence
//! model needs, and a decoupled-weight-decay Adam optimizer.
//!
//! Everything here is deterministic: RNG streams are pure functions of
//! (key, counter), and every reduction runs in a fixed order so results do
//! not depend on thread count.

mod adamw;
pub mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use adamw::{clip_global_norm, AdamW};
pub use rng::Rng;
pub use tape::{AttentionPattern, NodeId, Tape};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors surfaced by tensor/tape operations. Shape mismatches name both
/// offending shapes so a failed model wiring is debuggable from the message.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("element count mismatch: shape {shape:?} wants {want} values, got {got}")]
    BadElementCount {
        shape: Vec<usize>,
        want: usize,
        got: usize,
    },
    #[error("backward requires a scalar root, got shape {got:?}")]
    NonScalarLoss { got: Vec<usize> },
    #[error("index {index} out of bounds for axis of size {size} in {op}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
}

pub type Result<T> = std::result::Result<T, NumericsError>;
