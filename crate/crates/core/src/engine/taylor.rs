//! First-order check of the renoised pair: for small noise,
//! `F(y_p) − F(y_n) ≈ (σ_p + σ_n)·J_F(x̂)·n̂`.

use serde::{Deserialize, Serialize};

use super::rdc::{draw_scales, renoise};
use crate::denoiser::{forward, jvp_fd, Denoise};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RngStream;

/// Finite-difference step, as a fraction of `‖n̂‖`.
pub const JVP_RELATIVE_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorCheck {
    /// `‖lhs − rhs‖ / ‖rhs‖`.
    pub relative_error: f64,
    /// `‖lhs − rhs‖`.
    pub discrepancy: f64,
    pub rhs_norm: f64,
    pub sigma_n: f64,
    pub sigma_p: f64,
}

/// Draws scales from `N(1, sigma)` and compares both sides with the
/// predicted noise shrunk by `shrink`.
pub fn taylor_consistency_check<M: Denoise + ?Sized>(
    model: &M,
    y: &Image,
    shrink: f64,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<TaylorCheck> {
    let (sigma_n, sigma_p) = draw_scales(sigma, rng)?;
    taylor_with_scales(model, y, shrink, sigma_n, sigma_p)
}

/// Same as [`taylor_consistency_check`] with explicit scales.
pub fn taylor_with_scales<M: Denoise + ?Sized>(
    model: &M,
    y: &Image,
    shrink: f64,
    sigma_n: f64,
    sigma_p: f64,
) -> Result<TaylorCheck> {
    if !(shrink > 0.0 && shrink <= 1.0) {
        return Err(Error::Parameter(format!("shrink must lie in (0, 1], got {shrink}")));
    }
    let x_hat = forward(model, y)?;
    let n_hat = y.residual(&x_hat)?;
    let noise_norm = n_hat.l2_norm();
    if noise_norm < 1e-12 {
        return Err(Error::Indeterminate("predicted noise is zero; nothing to expand".into()));
    }
    let direction = n_hat.scale(shrink)?;
    let pair = renoise(x_hat, direction, sigma_n, sigma_p)?;
    let out = model.denoise_batch(&[&pair.y_p, &pair.y_n])?;
    let lhs = out[0].residual(&out[1])?;
    let step = JVP_RELATIVE_STEP * noise_norm / pair.n_hat.l2_norm();
    let rhs = jvp_fd(model, &pair.x_hat, &pair.n_hat, step)?.scale(sigma_p + sigma_n)?;
    let rhs_norm = rhs.l2_norm();
    if rhs_norm < 1e-12 {
        return Err(Error::Indeterminate(format!(
            "first-order term vanishes (norm {rhs_norm:e}); relative error undefined"
        )));
    }
    let discrepancy = lhs.add_scaled(&rhs, -1.0)?.l2_norm();
    Ok(TaylorCheck {
        relative_error: discrepancy / rhs_norm,
        discrepancy,
        rhs_norm,
        sigma_n,
        sigma_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::stubs::{square_model, ConstantModel, IdentityModel, LinearModel, PointwiseModel};
    use crate::image::Shape;

    fn y_image(seed: u64) -> Image {
        let mut rng = RngStream::new(seed, "t");
        Image::from_fn(Shape::new(12, 12, 1), |_, _, _| rng.uniform(0.2, 0.9)).unwrap()
    }

    #[test]
    fn linear_maps_are_exact() {
        let y = y_image(1);
        for shrink in [1.0, 0.1, 0.01] {
            let r = taylor_consistency_check(&LinearModel::smoothing(), &y, shrink, 0.75, &mut RngStream::new(2, "s")).unwrap();
            assert!(r.relative_error <= 1e-6, "shrink {shrink}: {}", r.relative_error);
        }
    }

    #[test]
    fn square_stub_matches_analytic_remainder() {
        // For F(v)=v², lhs − rhs = (σ_n² − σ_p²)·(s·n̂)² elementwise and the
        // central difference is exact, so the error is known in closed form.
        let y = y_image(3);
        let f = square_model();
        let (sn, sp) = (1.3, 0.6);
        let s = 0.01;
        let r = taylor_with_scales(&f, &y, s, sn, sp).unwrap();
        let x_hat = forward(&f, &y).unwrap();
        let n = y.residual(&x_hat).unwrap();
        let num: f64 = n.as_slice().iter().map(|v| ((sn * sn - sp * sp) * (s * v).powi(2)).powi(2)).sum::<f64>().sqrt();
        let den: f64 = x_hat
            .as_slice()
            .iter()
            .zip(n.as_slice())
            .map(|(x, v)| ((sn + sp) * 2.0 * x * s * v).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((r.relative_error - num / den).abs() < 1e-6 * (num / den) + 1e-9);
        assert!(r.relative_error <= 0.02);
    }

    #[test]
    fn halving_shrink_quarters_the_discrepancy() {
        let y = y_image(4);
        let smooth = PointwiseModel(|v: f64| 0.8 * v + 0.3 * (3.0 * v).sin());
        for model in [&smooth as &dyn Denoise, &square_model()] {
            let d = |s| taylor_with_scales(model, &y, s, 1.4, 0.5).unwrap().discrepancy;
            for s in [0.04, 0.02, 0.01] {
                let ratio = d(s) / d(s / 2.0);
                assert!((3.0..=5.0).contains(&ratio), "shrink {s}: ratio {ratio}");
            }
        }
    }

    #[test]
    fn degenerate_inputs_are_indeterminate() {
        let y = y_image(5);
        assert!(matches!(
            taylor_consistency_check(&IdentityModel, &y, 0.5, 0.75, &mut RngStream::new(1, "x")),
            Err(Error::Indeterminate(_))
        ));
        assert!(matches!(
            taylor_consistency_check(&ConstantModel(0.5), &y, 0.5, 0.75, &mut RngStream::new(1, "x")),
            Err(Error::Indeterminate(_))
        ));
        assert!(taylor_consistency_check(&square_model(), &y, 0.0, 0.75, &mut RngStream::new(1, "x")).is_err());
        assert!(taylor_consistency_check(&square_model(), &y, 1.5, 0.75, &mut RngStream::new(1, "x")).is_err());
    }
}
