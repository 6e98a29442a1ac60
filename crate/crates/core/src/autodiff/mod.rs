//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is recorded during the forward pass: every op evaluates
//! eagerly, stores its output and the handles of its inputs. [`Graph::backward`]
//! then walks the tape once in reverse and returns [`Gradients`]. Tapes are
//! single-use; one is built per training step and dropped after the update.
//!
//! Broadcasting is limited to the explicit `add_b`/`mul_b` ops where the
//! second operand has the same rank with unit extents on repeated axes.

mod backward;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use backward::Gradients;
pub use gradcheck::{gradcheck, GradcheckReport, ParamCheck};
pub use graph::{band_mask, Graph, Var};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use graph::softplus;

#[cfg(test)]
mod tests;
