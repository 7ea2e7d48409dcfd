//! The twelve base augmentations as differentiable, parameterized graph
//! operations, and their composition into semantics transformations.
//!
//! A [`TransformChain`] is an ordered list of distinct [`BaseOpKind`]s drawn
//! from a [`ChainDistribution`]; its learnable parameters live in
//! [`TransformParams`]. [`apply_chain`] builds the transformed batch on a
//! [`Graph`](crate::autodiff::Graph) so that gradients reach both the image
//! and the parameters.

mod apply;
mod chain;
mod hsv;
mod kind;
mod params;
pub mod preview;

pub use apply::{apply_base, apply_chain, transform_images, INVERT_STEEPNESS};
pub use chain::{ChainDistribution, TransformChain};
pub use hsv::hsv_shift;
pub use kind::{BaseOpKind, ParamSpec};
pub use params::{clamp_params, Frozen, TransformParams, INIT_NOISE};
