//! CPU-only numerical kit for lightweight human pose networks.
//!
//! The crate builds everything from the tensor up: direct convolution
//! kernels validated against naive oracles, a minimal reverse-mode tape, the
//! lightweight bottleneck / global-context building blocks, network builders
//! with exact parameter and MAC accounting, the heatmap codec
//! (Gaussian targets, argmax and beta-soft-argmax decoding, flip averaging,
//! box affine geometry, OKS), and the iterative restart training schedule
//! with a desk-scale synthetic training loop.

pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod kernels;
pub mod network;
pub mod oracle;
pub mod posecodec;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, Shape, Tensor};
