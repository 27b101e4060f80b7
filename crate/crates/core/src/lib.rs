//! Multi-view depth diffusion for 3D shape generation and depth completion.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`camera`]: pinhole cameras and the eight-view rig layouts
//! * [`geometry`]: projection, visibility tests and depth fusion
//! * [`attention`]: epipolar line-segment cross-view attention
//! * [`scheduler`]: noise schedule, training objective and samplers
//! * [`denoiser`]: the ε-prediction U-Net with a hand-written backward pass
//! * [`metrics`]: Chamfer / EMD and the generative-set metrics
//! * [`dataset`]: synthetic primitives, analytic depth rendering and file formats

// `!(a > b)` is used on purpose so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod camera;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod registry;
pub mod rng;
pub mod scheduler;

pub use error::{Error, Result};
