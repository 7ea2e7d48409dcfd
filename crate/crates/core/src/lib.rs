//! Adversarial learning with semantics transformations for single-domain
//! generalization: a small reverse-mode autodiff engine, differentiable
//! parameterized image augmentations, a LeNet-style classifier, the min-max
//! training loop with its domain pool, and synthetic evaluation domains.

pub mod autodiff;
pub mod classifier;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
