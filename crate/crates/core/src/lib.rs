//! Multi-exposure HDR fusion with a gated Swin transformer U-Net, built on a
//! small reverse-mode autodiff tensor library.

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod data;
pub mod graph;
pub mod loss;
pub mod model;
pub mod ops;
pub mod params;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use graph::{ConvKind, Gradients, Graph, Var};
pub use model::{init_parameters, predict, ModelConfig};
pub use params::ParameterSet;
pub use tensor::{DType, Float, Tensor};
pub use transformer::GatingMode;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
