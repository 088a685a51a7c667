//! Partial-convolution U-Net with hand-written backpropagation.

pub mod checkpoint;
pub mod layers;
pub mod tensor;
pub mod unet;

pub use layers::{partial_conv, partial_conv_backward, BatchNorm, Conv};
pub use tensor::{matmul, Scalar, Tensor};
pub use unet::{backward, batch_inputs, forward, predict, LayerId, Mode, UNetConfig, UNetWeights};
