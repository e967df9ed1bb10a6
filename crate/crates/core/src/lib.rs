//! Single-image self-supervised denoising by renoising a pretrained
//! denoiser's own prediction with randomly scaled positive and negative
//! copies of its predicted noise, and training the two outputs to agree.
//!
//! The crate is organised bottom-up:
//!
//! - [`image`], [`rng`], [`dataset`]: rasters, PNG/TIFF I/O, seeded streams, manifests.
//! - [`noise`]: synthetic noise and residual statistics.
//! - [`denoiser`]: the encoder–decoder `F`, pretraining, checkpoints.
//! - [`engine`]: pair construction, loss, per-image training, diagnostics.
//! - [`metrics`], [`evaluation`]: PSNR/SSIM, convergence, ablation grids.

pub mod dataset;
pub mod denoiser;
pub mod engine;
mod error;
pub mod evaluation;
pub mod image;
pub mod metrics;
pub mod noise;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use image::{Image, NoiseResidual, Shape};
pub use rng::RngStream;
