//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s; one call to
//! [`Graph::backward`] walks the record in reverse and returns the gradient
//! of a scalar with respect to every leaf created with [`Graph::param`].
//! The element type is generic over [`Real`], so the same code runs in `f64`
//! for gradient checks and in `f32` for training.

mod check;
mod graph;
mod kernels;
mod real;
mod tensor;

pub use check::{check_coordinates, check_with_graph, finite_difference_check, GradCheck, ScalarFn};
pub use graph::{CustomOp, Gradients, Graph, Var, PRIMITIVES};
pub use real::Real;
pub use tensor::{numel, Tensor};
