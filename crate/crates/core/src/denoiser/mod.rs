//! The image-to-image denoiser `F`, its Gaussian pretraining, checkpoints,
//! and a finite-difference Jacobian-vector probe.

mod checkpoint;
pub(crate) mod layers;
mod network;
mod optim;
mod pretrain;
pub mod stubs;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
pub use network::{Activation, ArchConfig, EncoderDecoder, Gradients, Mode, Pooling};
pub use optim::{AdamW, AdamWConfig};
pub use pretrain::{pretrain_gaussian, PretrainConfig, PretrainOutcome};

use crate::error::{Error, Result};
use crate::image::{Image, NoiseResidual};

/// Anything that maps an image to a denoised image of the same shape.
pub trait Denoise: Send + Sync {
    fn denoise(&self, image: &Image) -> Result<Image>;

    fn denoise_batch(&self, images: &[&Image]) -> Result<Vec<Image>> {
        images.iter().map(|i| self.denoise(i)).collect()
    }
}

impl Denoise for EncoderDecoder {
    fn denoise(&self, image: &Image) -> Result<Image> {
        Ok(self.forward_batch(&[image])?.pop().expect("one output per input"))
    }

    fn denoise_batch(&self, images: &[&Image]) -> Result<Vec<Image>> {
        self.forward_batch(images)
    }
}

impl<T: Denoise + ?Sized> Denoise for &T {
    fn denoise(&self, image: &Image) -> Result<Image> {
        (**self).denoise(image)
    }

    fn denoise_batch(&self, images: &[&Image]) -> Result<Vec<Image>> {
        (**self).denoise_batch(images)
    }
}

/// `x̂ = F(y)`, unclamped and shape-preserving.
pub fn forward<M: Denoise + ?Sized>(model: &M, image: &Image) -> Result<Image> {
    let out = model.denoise(image)?;
    out.ensure_shape(image.shape())?;
    Ok(out)
}

/// Central difference `(F(p + h·d) − F(p − h·d)) / 2h ≈ J_F(p)·d`.
pub fn jvp_fd<M: Denoise + ?Sized>(
    model: &M,
    point: &Image,
    direction: &NoiseResidual,
    step: f64,
) -> Result<NoiseResidual> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Parameter(format!("jvp step must be positive, got {step}")));
    }
    direction.ensure_shape(point.shape())?;
    let plus = point.add_scaled(direction, step)?;
    let minus = point.add_scaled(direction, -step)?;
    let out = model.denoise_batch(&[&plus, &minus])?;
    out[0].zip_with(&out[1], |a, b| (a - b) / (2.0 * step))
}
