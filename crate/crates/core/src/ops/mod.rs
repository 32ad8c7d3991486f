//! Differentiable primitives.
//!
//! Each submodule provides the plain tensor kernel (usable without a graph)
//! and a recording method on [`Graph`](crate::graph::Graph).

pub mod attention;
pub mod blur;
pub mod conv;
pub mod elementwise;
pub mod layout;
pub mod norm;

pub use blur::{blur_valid, gaussian_kernel};
pub use conv::conv2d;
pub use elementwise::{gelu, gelu_scalar, mu_law_scalar, sigmoid_scalar, softmax};
pub use layout::{
    concat_channels, crop, pixel_shuffle, pixel_unshuffle, reflect_pad, roll, split_channels,
    window_partition, window_reverse,
};
pub use norm::{layer_norm, LAYER_NORM_EPS};
