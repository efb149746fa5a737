//! Forward and backward kernels used by the autodiff [`Graph`](crate::graph::Graph).

pub mod conv;
mod gemm;
pub mod norm;
pub mod reshape;

pub use conv::{conv2d, pseudo3d_pair, temporal_conv, PadMode};
pub use norm::channel_norm;
pub use reshape::{pixel_shuffle, pixel_unshuffle, upsample2};

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
