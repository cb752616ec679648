//! Dense tensors and the handful of differentiable layers the tracker
//! needs, each with a hand-written backward pass.

mod activation;
mod conv;
mod gemm;
mod numeric;
mod pool;
mod sgd;
mod softmax;
mod tensor;

pub use activation::{lrn, lrn_backward, relu, relu_backward, LrnParams};
pub use conv::{conv2d, conv2d_backward, conv_output_extent, Conv2dGrads, Conv2dParams};
pub use numeric::{numeric_grad, relative_error};
pub use pool::{
    global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, MaxPoolOutput,
};
pub use sgd::{sgd_step, SgdConfig};
pub use softmax::{softmax2, softmax2_backward, softmax_pair};
pub use tensor::Tensor;
