//! Semantically-constrained adversarial sampling on desk-scale models.
//!
//! The crate bundles a small reverse-mode differentiation engine
//! ([`numerics`]), deterministic DDIM sampling with spatially masked guidance
//! ([`diffusion`]), trainable toy denoisers and classifiers ([`models`]), the
//! residual-approximated adversarial sampler ([`resadv`]), a differentiable
//! Gaussian-splat renderer with expectation-over-transformation attacks
//! ([`splat3d`]), taxonomy-driven task construction ([`taxonomy`]) and the
//! evaluation metrics ([`evalmetrics`]).

pub mod diffusion;
pub mod error;
pub mod evalmetrics;
pub mod models;
pub mod numerics;
pub mod resadv;
pub mod splat3d;
pub mod taxonomy;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
