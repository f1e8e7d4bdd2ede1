//! Forward and backward passes for every layer kind used by the model zoo.
//!
//! Forward functions that feed a backward pass return an explicit cache; the
//! backward functions consume that cache instead of recomputing the forward.

use alloc::vec::Vec;

use crate::tensor::Tensor;

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dropout;
pub mod linear;
pub mod loss;
pub mod lrn;
pub mod merge;
pub mod pool;

pub use activation::{relu, relu_backward};
pub use batchnorm::{batch_norm_backward, batch_norm_eval, batch_norm_train, BatchNormCache};
pub use conv::{conv2d, conv2d_backward, conv2d_train, ConvCache};
pub use dropout::{dropout, dropout_backward, DropoutMask};
pub use linear::{fully_connected, fully_connected_backward};
pub use loss::{softmax, softmax_cross_entropy, softmax_cross_entropy_backward};
pub use lrn::{local_response_norm, local_response_norm_backward, LrnCache, LrnParams};
pub use merge::{concat_channels, residual_add, residual_add_backward, split_channels};
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool, maxpool_backward, MaxPoolCache};

/// Train mode enables dropout and batch statistics; eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance carried by batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Learned parameters of one layer. For batch normalization `weights` is the
/// per-channel scale (rank 1) and `bias` the shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub running: Option<RunningStats>,
}

impl LayerParams {
    pub fn new(weights: Tensor, bias: Vec<f64>) -> Self {
        LayerParams {
            weights,
            bias,
            running: None,
        }
    }

    pub fn count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Gradients produced by one backward call. Parameter gradients are `None`
/// when the caller did not ask for them (frozen layers).
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub d_input: Tensor,
    pub d_weights: Option<Tensor>,
    pub d_bias: Option<Vec<f64>>,
}
