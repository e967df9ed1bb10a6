//! Closed-form stand-ins for a trained network, used to check the engine and
//! the analysis tools against known answers.

use super::Denoise;
use crate::error::Result;
use crate::image::Image;

/// `F(y) = y`.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityModel;

impl Denoise for IdentityModel {
    fn denoise(&self, image: &Image) -> Result<Image> {
        Ok(image.clone())
    }
}

/// `F(y) = c` everywhere.
#[derive(Clone, Copy, Debug)]
pub struct ConstantModel(pub f64);

impl Denoise for ConstantModel {
    fn denoise(&self, image: &Image) -> Result<Image> {
        Image::filled(image.shape(), self.0)
    }
}

/// Elementwise `F(y)_i = f(y_i)`.
#[derive(Clone, Copy, Debug)]
pub struct PointwiseModel<F>(pub F);

impl<F: Fn(f64) -> f64 + Send + Sync> Denoise for PointwiseModel<F> {
    fn denoise(&self, image: &Image) -> Result<Image> {
        image.map(&self.0)
    }
}

/// `F(y)_i = y_i²`.
pub fn square_model() -> PointwiseModel<fn(f64) -> f64> {
    PointwiseModel(|v| v * v)
}

/// A fixed linear map: per-channel 3x3 correlation (zero boundary) scaled by `gain`.
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub kernel: [[f64; 3]; 3],
    pub gain: f64,
}

impl LinearModel {
    pub fn smoothing() -> Self {
        Self {
            kernel: [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]].map(|r| r.map(|v| v / 16.0)),
            gain: 0.9,
        }
    }
}

impl Denoise for LinearModel {
    fn denoise(&self, image: &Image) -> Result<Image> {
        let (h, w) = (image.height() as isize, image.width() as isize);
        Image::from_fn(image.shape(), |c, y, x| {
            let mut acc = 0.0;
            for (ky, row) in self.kernel.iter().enumerate() {
                for (kx, k) in row.iter().enumerate() {
                    let sy = y as isize + ky as isize - 1;
                    let sx = x as isize + kx as isize - 1;
                    if sy >= 0 && sx >= 0 && sy < h && sx < w {
                        acc += k * image.get(c, sy as usize, sx as usize);
                    }
                }
            }
            self.gain * acc
        })
    }
}
