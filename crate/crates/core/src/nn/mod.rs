//! Minimal 3D convolutional network toolkit: channel-first tensors,
//! GEMM-lowered convolutions, a sequential container with manual
//! reverse-mode gradients and an Adam optimiser.

mod conv;
mod layers;
mod param;
mod tensor;

pub use conv::Conv3d;
pub use layers::{avg_pool2, upsample2, Layer, Sequential, LEAKY_SLOPE};
pub use param::{Adam, Param};
pub use tensor::Tensor;
