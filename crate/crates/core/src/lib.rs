//! Skeleton-guided attention fusion for activity recognition.
//!
//! A spatiotemporal graph-convolution network classifies skeleton sequences
//! and yields per-joint importance weights. Those weights scale the body-part
//! rows of a spatial-temporal region-of-interest image cut from the video
//! frames. A residual CNN classifies the weighted image, and the two branches
//! are ensembled.
//!
//! Everything numeric, including reverse-mode differentiation, lives in this
//! crate; see [`autodiff`].

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod nn;
pub mod optim;
pub mod param;
pub mod resnet;
pub mod rng;
pub mod stgcn;
pub mod stroi;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
