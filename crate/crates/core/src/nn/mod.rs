//! Differentiable layers: convolution, batch normalization, pooling, dense,
//! dropout, softmax and categorical cross-entropy.

mod batchnorm;
mod conv;
mod dense;
mod dropout;
pub mod init;
mod loss;
mod pool;

use serde::{Deserialize, Serialize};

pub use batchnorm::{batch_norm_infer, batch_norm_train, BatchNorm2d, BN_EPSILON, BN_MOMENTUM};
pub use conv::{conv2d, Conv2d, Padding};
pub use dense::{linear, Dense};
pub use dropout::{dropout, Dropout};
pub use loss::{cross_entropy, one_hot, softmax, LOG_FLOOR};
pub use pool::{channel_max, channel_mean, global_avg_pool, global_max_pool, max_pool2d};

/// Whether layers use batch statistics and stochastic regularization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    #[default]
    Infer,
}
