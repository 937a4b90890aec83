//! Privacy minimization transformation (PMT) for face images.
//!
//! The crate optimizes obfuscated images whose shallow-model features match
//! the original's while their appearance does not, so that an authorized
//! recognizer still works on them and unauthorized models, reconstruction
//! attacks and attribute probes do not. It bundles everything needed to
//! check those claims on a synthetic benchmark: a small reverse-mode layer
//! engine, toy recognizers, a procedural face generator, the attacks and the
//! metrics.

// Validation is written as `!(x > 0.0)` throughout so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod pmt;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use layers::{layer_backward, layer_forward, LayerSpec};
pub use model::{Activations, Gradients, Model, ModelSpec, SplitModel};
pub use tensor::{Image, Tensor};
