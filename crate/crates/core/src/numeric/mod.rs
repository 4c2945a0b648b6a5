//! Dense tensors, reverse-mode differentiation, a finite-difference oracle,
//! and the Adamax optimizer.

mod adamax;
mod gradcheck;
mod tape;
mod tensor;

pub use adamax::{AdamaxConfig, AdamaxState};
pub use gradcheck::{
    central_difference, check_gradients, loss_fn, rel_error, GradCheckReport, Violation,
    REL_ERROR_FLOOR,
};
pub use tape::{Gradients, NodeId, Precision, Tape, Var};
pub use tensor::Tensor;
