//! Light-field novel view synthesis from four corner sub-aperture views.
//!
//! The pipeline estimates a disparity map at the requested novel view from
//! plane-sweep statistics of the input views, backward-warps every input to
//! that view, and predicts the final color from the warped images. Both the
//! disparity estimator and the color predictor are small convolutional
//! networks trained end to end by minimizing the synthesis error against
//! ground-truth views, with the gradient routed through the warp by a numeric
//! Jacobian.
//!
//! Modules:
//! - [`tensor`]: dense HWC float tensors, valid convolution with backward
//!   passes, ReLU.
//! - [`lfio`]: light-field container format, image import/export, training
//!   patch extraction.
//! - [`warp`]: bicubic sampling, backward warping, numeric warp Jacobian.
//! - [`sweep`]: plane-sweep mean/std feature stacks.
//! - [`nets`]: the two task networks and the model file format.
//! - [`train`]: loss, end-to-end gradients, ADAM, the three-stage schedule.
//! - [`synthgen`]: procedural light-field generator with exact disparity
//!   ground truth.
//! - [`eval`]: PSNR/SSIM and non-learned baselines.
//! - [`pipeline`]: full-frame synthesis gluing the pieces together.
//! - [`gradcheck`]: finite-difference verification of every backward pass.
//!
//! With the default `parallel` feature the data-parallel loops run on rayon;
//! without it everything runs sequentially. Either way results are bitwise
//! identical at any thread count: parallel loops write disjoint outputs and
//! all reductions fold in a fixed order.

pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod lfio;
pub mod nets;
pub mod pipeline;
pub mod sweep;
pub mod synthgen;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
