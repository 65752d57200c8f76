//! Minimal CPU building blocks for volumetric U-Nets.
//!
//! Tensors are single-sample and channels-last (`[voxel][channel]`). Each
//! layer exposes a pure `forward` plus a `backward` that takes whatever the
//! forward pass cached and accumulates parameter gradients, so a frozen
//! network can serve concurrent inference calls.

mod adam;
mod conv;
mod gemm;
mod norm;
mod resize;
mod tensor;
mod unet;

pub use adam::{Adam, AdamConfig};
pub use conv::{Conv3d, ConvGrad};
pub use norm::{instance_norm, instance_norm_backward, NormCache, LEAKY_SLOPE};
pub use resize::{upsample2, upsample2_backward};
pub use tensor::Tensor;
pub use unet::{FinalActivation, UNet, UNetCache, UNetConfig};
