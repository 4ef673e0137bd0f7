//! A small reverse-mode autodiff engine and the CBAM convolutional classifier built on it.
// `!(x > y)` is used on purpose: it is also true for NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cbam;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use error::{Error, Result};
pub use model::{build_model, Model, ModelSpec};
pub use tensor::{no_grad, Element, GradientMap, Shape, Tensor};
