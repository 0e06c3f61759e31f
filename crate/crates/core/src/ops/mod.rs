//! Layer kernels with hand-written backward passes.

mod activation;
mod conv;
mod norm;
mod softmax;

pub use activation::{leaky_relu_backward, leaky_relu_forward, leaky_relu_inplace};
pub use conv::{
    conv3d_backward, conv3d_forward, transposed_conv3d_backward, transposed_conv3d_forward,
    ConvGrads, ConvSpec,
};
pub use norm::{
    instance_norm_backward, instance_norm_forward, instance_norm_forward_cached, NormCache,
    NormGrads, NORM_EPS,
};
pub use softmax::{log_softmax_channels, softmax_channels};
