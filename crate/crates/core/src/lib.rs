//! Depth-guided image deblurring in the wavelet domain.
//!
//! The pipeline decomposes an image with a 2D DWT, runs a small
//! encoder-decoder over the coarse sub-bands (optionally conditioned on a
//! depth map), predicts residual coefficients and inverts the transform with
//! the fine detail bands passed through untouched.

pub mod autodiff;
pub mod blur;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod profile;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
