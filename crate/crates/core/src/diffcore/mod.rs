//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive as it is evaluated; [`Graph::backward`]
//! walks the record in reverse. The primitive set is exactly what the model
//! and losses need: elementwise arithmetic, row broadcasting, matmul,
//! reshaping and indexing, reductions (max/min route to the lowest-index
//! winner), exp/log/sigmoid, tanh-GELU, softmax, layer norm and pairwise
//! squared distances.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, FdOptions, FdReport};
pub use graph::{Graph, Var};
pub use tensor::{Scalar, Tensor};


#[cfg(test)]
mod tests;
