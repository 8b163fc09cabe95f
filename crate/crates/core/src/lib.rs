//! Sparse-view fan-beam CT reconstruction regularized by a shallow denoising
//! diffusion model.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: fan-beam acquisition geometry, the Siddon projector `A` and
//!   its exact adjoint.
//! * [`varrecon`]: least-squares and TV-regularized iterative reconstruction.
//! * [`diffusion`]: noise schedules, the convolutional noise predictor with
//!   hand-written reverse-mode derivatives, Adam training and reverse steps.
//! * [`latent`]: the deterministic reverse-process decoder, its
//!   vector-Jacobian product and the latent-variable optimization.
//! * [`phantom`] and [`metrics`]: synthetic data and SSIM/PSNR scoring.
//! * [`io`]: on-disk image, sinogram and checkpoint formats.

pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod varrecon;

pub use error::{Error, Result};
pub use geometry::FanBeamGeometry;
pub use image::{Image, Sinogram};
