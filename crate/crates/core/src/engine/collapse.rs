//! Detection of the two trivial solutions of a consistency-only objective:
//! a constant output, and the identity map with zero predicted noise.

use serde::{Deserialize, Serialize};

use crate::denoiser::{forward, Denoise};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollapseStatus {
    #[default]
    Ok,
    ZeroMap,
    IdentityMap,
}

impl CollapseStatus {
    pub fn is_collapsed(self) -> bool {
        self != CollapseStatus::Ok
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollapseThresholds {
    /// Output standard deviation below which the map is considered constant.
    pub zero_map_std: f64,
    /// Mean absolute change below which the map is considered the identity...
    pub identity_mean_abs: f64,
    /// ...provided the input's estimated noise level exceeds this.
    pub visible_noise_std: f64,
}

impl Default for CollapseThresholds {
    fn default() -> Self {
        Self {
            zero_map_std: 1e-3,
            identity_mean_abs: 1e-4,
            visible_noise_std: 5e-3,
        }
    }
}

impl CollapseThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("zero_map_std", self.zero_map_std),
            ("identity_mean_abs", self.identity_mean_abs),
            ("visible_noise_std", self.visible_noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("collapse.{name} must be a finite value >= 0")));
            }
        }
        Ok(())
    }
}

/// Robust noise level from the finest diagonal Haar detail band:
/// `median(|HH|) / 0.6745`, pooled over channels.
pub fn estimate_noise_std(image: &Image) -> f64 {
    let (h, w) = (image.height(), image.width());
    let mut detail = Vec::with_capacity(image.as_slice().len() / 4);
    for c in 0..image.channels() {
        let p = image.channel(c);
        for y in (0..h.saturating_sub(1)).step_by(2) {
            for x in (0..w.saturating_sub(1)).step_by(2) {
                let (a, b) = (p[y * w + x], p[y * w + x + 1]);
                let (cc, d) = (p[(y + 1) * w + x], p[(y + 1) * w + x + 1]);
                detail.push(((a - b - cc + d) / 2.0).abs());
            }
        }
    }
    if detail.is_empty() {
        return 0.0;
    }
    let mid = detail.len() / 2;
    let (_, m, _) = detail.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m / 0.6745
}

/// Classifies an already computed output `F(y)`.
pub fn classify_output(output: &Image, y: &Image, thresholds: &CollapseThresholds) -> Result<CollapseStatus> {
    output.ensure_shape(y.shape())?;
    let varies = y.as_slice().iter().any(|&v| v != y.as_slice()[0]);
    if varies && output.std() < thresholds.zero_map_std {
        return Ok(CollapseStatus::ZeroMap);
    }
    let change = output.residual(y)?.mean_abs();
    if change < thresholds.identity_mean_abs && estimate_noise_std(y) > thresholds.visible_noise_std {
        return Ok(CollapseStatus::IdentityMap);
    }
    Ok(CollapseStatus::Ok)
}

pub fn collapse_check<M: Denoise + ?Sized>(model: &M, y: &Image) -> Result<CollapseStatus> {
    collapse_check_with(model, y, &CollapseThresholds::default())
}

pub fn collapse_check_with<M: Denoise + ?Sized>(
    model: &M,
    y: &Image,
    thresholds: &CollapseThresholds,
) -> Result<CollapseStatus> {
    let out = forward(model, y)?;
    classify_output(&out, y, thresholds)
}
