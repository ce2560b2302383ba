//! Layer forward/backward computations for the synthesis networks.
//!
//! Every operation follows the same contract: `*_forward` consumes its input
//! tensor and returns `(output, cache)`, where the cache owns whatever the
//! matching `*_backward` needs (usually the input itself). Consuming the
//! input keeps training memory at one copy per activation; callers that need
//! an input afterwards clone it explicitly.
//!
//! Convolution is cross-correlation (no kernel flip) with symmetric
//! zero-padding. All gradients are exact; the test suite checks every
//! backward path against central finite differences at 64-bit precision.

mod activation;
mod batchnorm;
mod conv;
mod pool;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward, ReluCache, SigmoidCache};
pub use batchnorm::{
    batchnorm3d_backward, batchnorm3d_eval, batchnorm3d_forward, BatchNormCache, BatchNormGrads,
    BatchNormParams, BnMode,
};
pub use conv::{conv3d_backward, conv3d_forward, Conv3dCache, Conv3dGrads, ConvParams};
pub use pool::{
    maxpool3d_backward, maxpool3d_forward, upsample_nearest2x_backward,
    upsample_nearest2x_forward, MaxPoolCache,
};
