//! Differentiable tensor operations. Every forward op has a matching backward.

pub mod conv;
pub mod dense;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, conv2d_backward, conv2d_backward_select, conv2d_direct, ConvGrads, ConvParams, ConvSpec};
pub use dense::{
    fully_connected, fully_connected_backward, global_avg_pool, global_avg_pool_backward, relu, relu_backward,
    softmax_cross_entropy, LinearGrads, LinearParams,
};
pub use norm::{batch_norm, batch_norm_backward, BnCache, BnGrads, BN_EPS, BN_MOMENTUM};
pub use pool::{max_pool2x2, max_pool2x2_backward, MaxPoolOutput};

/// Whether batch normalization uses batch statistics (and updates its running
/// averages) or the stored running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
