//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The tape records backward rules as ordinary graph operations, so a gradient can be
//! differentiated again. That is what a Wasserstein gradient penalty needs and what the
//! common Rust deep-learning crates do not offer.

pub mod graph;
pub mod nn;
pub mod optim;
pub mod param;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use nn::{Conv2d, ConvTranspose2d, Linear};
pub use optim::Adam;
pub use param::{Module, Param, ParamId};
pub use tensor::{ConvGeom, Tensor};
