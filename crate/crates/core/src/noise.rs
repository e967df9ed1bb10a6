//! Synthetic noise and residual statistics.
//!
//! Besides generating Gaussian and Poisson-Gaussian corruptions, this module
//! measures whether a residual distribution is centered and symmetric, and
//! builds the mirrored observation `2·clean − noisy`.

use std::io::Write;
use std::path::Path;

use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::rng::RngStream;

pub const HISTOGRAM_BINS: usize = 65;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseSpec {
    /// i.i.d. `N(0, sigma²)` per element.
    Gaussian { sigma: f64 },
    /// `a · Poisson(clean / a) + N(0, b)`, so the variance is `a·clean + b`.
    PoissonGaussian { a: f64, b: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        let valid = match *self {
            NoiseSpec::Gaussian { sigma } => ok(sigma),
            NoiseSpec::PoissonGaussian { a, b } => ok(a) && ok(b),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "noise parameters must be finite and non-negative: {self:?}"
            )))
        }
    }
}

/// Corrupts `clean` according to `spec`. The output is not clamped.
pub fn add_noise(clean: &Image, spec: &NoiseSpec, rng: &mut RngStream) -> Result<Image> {
    spec.validate()?;
    match *spec {
        NoiseSpec::Gaussian { sigma } => {
            if sigma == 0.0 {
                return Ok(clean.clone());
            }
            clean.map(|v| v + sigma * rng.standard_normal())
        }
        NoiseSpec::PoissonGaussian { a, b } => {
            let read_sd = b.sqrt();
            let mut shot = |v: f64| -> f64 {
                let lambda = v.max(0.0) / a;
                if a == 0.0 || lambda == 0.0 {
                    return v.max(0.0);
                }
                let d = Poisson::new(lambda).expect("positive finite rate");
                a * rng.sample(&d)
            };
            let data: Vec<f64> = clean.as_slice().iter().map(|&v| shot(v)).collect();
            let with_shot = Image::new(clean.shape(), data)?;
            if read_sd == 0.0 {
                return Ok(with_shot);
            }
            with_shot.map(|v| v + read_sd * rng.standard_normal())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub center: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub sample_count: u64,
    pub histogram: Vec<HistogramBin>,
}

/// Pools `noisy_k − clean` over every rendition and element.
pub fn residual_stats(noisy: &[Image], clean: &Image) -> Result<ResidualStats> {
    let pairs: Vec<(&Image, &Image)> = noisy.iter().map(|n| (n, clean)).collect();
    residual_stats_pairs(&pairs)
}

/// Like [`residual_stats`], but each noisy image has its own reference.
pub fn residual_stats_pairs(pairs: &[(&Image, &Image)]) -> Result<ResidualStats> {
    if pairs.is_empty() {
        return Err(Error::Parameter("residual statistics need at least one image".into()));
    }
    let mut samples = Vec::new();
    for (noisy, clean) in pairs {
        let r = noisy.residual(clean)?;
        samples.extend_from_slice(r.as_slice());
    }
    Ok(stats_of(&samples))
}

/// Moments plus a 65-bin histogram spanning `[−max|r|, +max|r|]`.
pub fn stats_of(samples: &[f64]) -> ResidualStats {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let (m2, m3) = samples.iter().fold((0.0, 0.0), |(m2, m3), &v| {
        let d = v - mean;
        (m2 + d * d, m3 + d * d * d)
    });
    let (m2, m3) = (m2 / n, m3 / n);
    let std = m2.sqrt();
    let skewness = if std > 0.0 { m3 / (m2 * std) } else { 0.0 };

    let extent = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    let width = if extent > 0.0 {
        2.0 * extent / HISTOGRAM_BINS as f64
    } else {
        0.0
    };
    for &v in samples {
        let bin = if width > 0.0 {
            (((v + extent) / width).floor() as usize).min(HISTOGRAM_BINS - 1)
        } else {
            HISTOGRAM_BINS / 2
        };
        counts[bin] += 1;
    }
    let histogram = counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            center: -extent + (i as f64 + 0.5) * width,
            count,
        })
        .collect();
    ResidualStats {
        mean,
        std,
        skewness,
        sample_count: samples.len() as u64,
        histogram,
    }
}

impl ResidualStats {
    /// Largest `|freq(b) − freq(−b)| / sample_count` over mirrored bin pairs.
    pub fn max_symmetry_deviation(&self) -> f64 {
        let k = self.histogram.len();
        (0..k / 2)
            .map(|i| self.histogram[i].count.abs_diff(self.histogram[k - 1 - i].count))
            .max()
            .unwrap_or(0) as f64
            / self.sample_count as f64
    }

    pub fn write_histogram_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("bin_center,frequency\n");
        for b in &self.histogram {
            out.push_str(&format!("{},{}\n", b.center, b.count));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// `2·clean − noisy`: the clean image carrying the negated noise.
pub fn opposite_noisy(noisy: &Image, clean: &Image) -> Result<Image> {
    clean.zip_with(noisy, |c, y| 2.0 * c - y)
}

/// Convenience for fixtures: `count` independent renditions of one image.
pub fn renditions(
    clean: &Image,
    spec: &NoiseSpec,
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<Image>> {
    (0..count).map(|_| add_noise(clean, spec, rng)).collect()
}

/// Shape shared by a list of images, or a shape error for the first outlier.
pub fn common_shape(images: &[Image]) -> Result<Option<Shape>> {
    let Some(first) = images.first() else {
        return Ok(None);
    };
    for img in images {
        img.ensure_shape(first.shape())?;
    }
    Ok(Some(first.shape()))
}
