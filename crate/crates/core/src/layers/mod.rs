//! Forward/backward kernels for every layer the networks use.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod norm;
pub mod pool;

pub use activation::{
    activation_backward, activation_forward, sign_activation_backward, sign_activation_forward,
    Activation, LEAKY_CLIP_SLOPE,
};
pub use conv::{conv2d_backward, conv2d_forward};
pub use dense::{linear_backward, linear_forward};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_backward};
pub use norm::{batchnorm_backward, batchnorm_forward, BatchNormState, BnCache};
pub use pool::{
    avg_pool2d_backward, avg_pool2d_forward, global_avg_pool_backward, global_avg_pool_forward,
    pool_out_dim,
};
