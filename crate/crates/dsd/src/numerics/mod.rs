//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is a Wengert tape: [`Graph`] owns a topologically ordered
//! vector of op records, each op computes eagerly during the forward pass,
//! and [`Graph::backward`] sweeps the tape in reverse. Tapes are rebuilt per
//! forward pass; tensors on a live tape are never mutated in place.
//!
//! Any op that produces a non-finite value aborts with
//! [`Error::Numeric`](crate::Error::Numeric) instead of letting NaN
//! propagate.

mod gradcheck;
mod graph;
mod tensor;


pub use gradcheck::finite_diff_check;
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
