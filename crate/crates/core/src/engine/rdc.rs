//! Renoised data construction.
//!
//! Given a noisy image `y`, the current model predicts `x̂ = F(y)` and the
//! noise `n̂ = y − x̂`. Two scalars `σ_n, σ_p ~ N(1, σ)` then give the
//! positive image `y_p = x̂ + σ_n·n̂` and the negative image `y_n = x̂ − σ_p·n̂`.

use crate::denoiser::{forward, Denoise};
use crate::error::{Error, Result};
use crate::image::{Image, NoiseResidual};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct RenoisedPair {
    pub y_p: Image,
    pub y_n: Image,
    pub sigma_p: f64,
    pub sigma_n: f64,
    pub x_hat: Image,
    pub n_hat: NoiseResidual,
}

/// Draws `(σ_n, σ_p)` independently from `N(1, sigma)`, in that order.
/// Negative draws are kept.
pub fn draw_scales(sigma: f64, rng: &mut RngStream) -> Result<(f64, f64)> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("scale width sigma must be >= 0, got {sigma}")));
    }
    let sigma_n = rng.normal(1.0, sigma);
    let sigma_p = rng.normal(1.0, sigma);
    Ok((sigma_n, sigma_p))
}

/// Builds the pair from an existing prediction and explicit scales.
pub fn renoise(x_hat: Image, n_hat: NoiseResidual, sigma_n: f64, sigma_p: f64) -> Result<RenoisedPair> {
    let y_p = x_hat.add_scaled(&n_hat, sigma_n)?;
    let y_n = x_hat.add_scaled(&n_hat, -sigma_p)?;
    Ok(RenoisedPair {
        y_p,
        y_n,
        sigma_p,
        sigma_n,
        x_hat,
        n_hat,
    })
}

/// Predicts `x̂`, `n̂` with `model` and renoises with fresh scale draws.
pub fn rdc_construct<M: Denoise + ?Sized>(
    model: &M,
    y: &Image,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<RenoisedPair> {
    let x_hat = forward(model, y)?;
    let n_hat = y.residual(&x_hat)?;
    let (sigma_n, sigma_p) = draw_scales(sigma, rng)?;
    renoise(x_hat, n_hat, sigma_n, sigma_p)
}

impl RenoisedPair {
    /// Largest violation of `y_p − x̂ = σ_n·n̂` and `x̂ − y_n = σ_p·n̂`.
    pub fn identity_error(&self) -> f64 {
        let s = self.x_hat.as_slice();
        let n = self.n_hat.as_slice();
        let p = self.y_p.as_slice();
        let q = self.y_n.as_slice();
        (0..s.len()).fold(0.0f64, |m, i| {
            let e1 = (p[i] - s[i] - self.sigma_n * n[i]).abs();
            let e2 = (s[i] - q[i] - self.sigma_p * n[i]).abs();
            m.max(e1).max(e2)
        })
    }
}
