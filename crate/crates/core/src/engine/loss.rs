//! Consistency objective between the two denoised outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Which exponent the elementwise penalty `(|d| + ε)^γ` uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormMode {
    /// γ moves linearly from `gamma_start` to `gamma_end` over the budget.
    #[default]
    #[serde(rename = "varying")]
    Varying,
    #[serde(rename = "fixed-2")]
    Fixed2,
    #[serde(rename = "fixed-1.5")]
    Fixed15,
}

impl NormMode {
    pub fn label(self) -> &'static str {
        match self {
            NormMode::Varying => "varying",
            NormMode::Fixed2 => "fixed-2",
            NormMode::Fixed15 => "fixed-1.5",
        }
    }
}

impl std::str::FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "varying" => Ok(NormMode::Varying),
            "fixed-2" => Ok(NormMode::Fixed2),
            "fixed-1.5" => Ok(NormMode::Fixed15),
            other => Err(Error::Parameter(format!(
                "norm must be one of varying, fixed-2, fixed-1.5; got `{other}`"
            ))),
        }
    }
}

/// `start + (end − start) · iteration / total`.
pub fn gamma_schedule(iteration: usize, total: usize, start: f64, end: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Parameter("gamma schedule needs total >= 1".into()));
    }
    if iteration > total {
        return Err(Error::Parameter(format!(
            "gamma schedule iteration {iteration} exceeds total {total}"
        )));
    }
    Ok(start + (end - start) * iteration as f64 / total as f64)
}

fn check_args(d_p: &Image, d_n: &Image, gamma: f64, epsilon: f64) -> Result<()> {
    d_n.ensure_shape(d_p.shape())?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(())
}

/// Mean over elements of `(|d_p − d_n| + ε)^γ`.
pub fn dcs_loss(d_p: &Image, d_n: &Image, gamma: f64, epsilon: f64) -> Result<f64> {
    check_args(d_p, d_n, gamma, epsilon)?;
    let a = d_p.as_slice();
    let b = d_n.as_slice();
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(p, n)| ((p - n).abs() + epsilon).powf(gamma))
        .sum();
    Ok(sum / a.len() as f64)
}

/// The loss and its gradient with respect to `d_p` (the gradient with
/// respect to `d_n` is the negation).
pub fn dcs_loss_grad(d_p: &Image, d_n: &Image, gamma: f64, epsilon: f64) -> Result<(f64, Vec<f64>)> {
    check_args(d_p, d_n, gamma, epsilon)?;
    let a = d_p.as_slice();
    let b = d_n.as_slice();
    let n = a.len() as f64;
    let mut sum = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            let d = p - q;
            let base = d.abs() + epsilon;
            sum += base.powf(gamma);
            gamma * base.powf(gamma - 1.0) * d.signum() * (d != 0.0) as u8 as f64 / n
        })
        .collect();
    Ok((sum / n, grad))
}
