//! Depth-aware learnable tokens for parameter-efficient, domain-generalized
//! semantic segmentation on frozen visual and depth encoders.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`numerics`]), frozen transformer stand-ins ([`backbone`]), the token
//! fusion adapter and its baselines ([`fusion`]), a multi-layer decoder
//! ([`decoder`]), training with a one-cycle schedule and checkpoints
//! ([`training`]), and a procedural RGB-D benchmark with domain shifts
//! ([`synthbench`]). [`run`] ties them into reproducible, config-driven runs.

pub mod backbone;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod run;
pub mod synthbench;
pub mod training;

pub use error::{Error, Result};
pub use fusion::{Variant, VariantConfig};
pub use model::{Model, ModelConfig};
