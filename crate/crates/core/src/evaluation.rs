//! Per-image evaluation runs, convergence summaries and ablation grids.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::denoiser::EncoderDecoder;
use crate::engine::{train_single_image, Component, NormMode, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{psnr, ssim};
use crate::rng::RngStream;

/// Largest post-plateau PSNR swing tolerated when locating the plateau.
pub const PLATEAU_BAND_DB: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the noisy input against the same reference.
    pub input_psnr: f64,
}

impl MetricResult {
    pub fn compute(image_id: &str, denoised: &Image, noisy: &Image, clean: &Image) -> Result<Self> {
        Ok(Self {
            image_id: image_id.to_string(),
            psnr: psnr(denoised, clean, 1.0)?,
            ssim: ssim(denoised, clean)?,
            input_psnr: psnr(noisy, clean, 1.0)?,
        })
    }

    pub fn gain(&self) -> f64 {
        self.psnr - self.input_psnr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Number of updates after which the PSNR stays inside the band.
    pub plateau_iteration: usize,
    pub post_plateau_range_db: f64,
}

/// Scans every suffix of `curve` (index = number of updates) for the first
/// one whose max − min is within [`PLATEAU_BAND_DB`].
pub fn convergence_of(curve: &[f64]) -> Result<ConvergenceReport> {
    if curve.is_empty() {
        return Err(Error::Parameter("convergence needs a non-empty PSNR curve".into()));
    }
    // suffix extrema, right to left
    let n = curve.len();
    let (mut lo, mut hi) = (vec![0.0; n], vec![0.0; n]);
    let (mut l, mut h) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in (0..n).rev() {
        l = l.min(curve[i]);
        h = h.max(curve[i]);
        lo[i] = l;
        hi[i] = h;
    }
    let plateau = (0..n).find(|&i| hi[i] - lo[i] <= PLATEAU_BAND_DB).expect("last suffix has zero range");
    Ok(ConvergenceReport {
        plateau_iteration: plateau,
        post_plateau_range_db: hi[plateau] - lo[plateau],
    })
}

/// Convergence of a training run; the curve starts at the pretrained
/// prediction when available.
pub fn convergence_report(report: &TrainReport) -> Result<ConvergenceReport> {
    let history = report
        .psnr_history
        .as_ref()
        .ok_or_else(|| Error::MissingReference("training report (no psnr history)".into()))?;
    let curve: Vec<f64> = report.initial_psnr.iter().chain(history).copied().collect();
    convergence_of(&curve)
}

/// A noisy image with its clean reference.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub noisy: Image,
    pub clean: Image,
}

impl Sample {
    pub fn from_manifest(dataset: &DatasetManifest) -> Result<Vec<Sample>> {
        dataset
            .entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    id: e.id.clone(),
                    clean: e.load_clean()?,
                    noisy: e.load_noisy()?,
                })
            })
            .collect()
    }
}

/// One finished per-image job.
#[derive(Clone, Debug)]
pub struct ImageRun {
    pub metrics: MetricResult,
    pub report: TrainReport,
}

/// The RNG stream owned by the job for `image_id`.
pub fn image_stream(seed: u64, image_id: &str) -> RngStream {
    RngStream::new(seed, format!("image/{image_id}"))
}

fn run_one(pretrained: &EncoderDecoder, sample: &Sample, config: &TrainConfig) -> Result<ImageRun> {
    let mut model = pretrained.clone();
    let mut rng = image_stream(config.seed, &sample.id);
    let report = train_single_image(&mut model, &sample.noisy, config, Some(&sample.clean), &mut rng)?;
    let metrics = MetricResult::compute(&sample.id, report.final_denoised(), &sample.noisy, &sample.clean)?;
    Ok(ImageRun { metrics, report })
}

/// Runs `f` on a private pool of `jobs` worker threads.
pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

/// A noisy image to be denoised, with its reference when one exists.
#[derive(Clone, Debug)]
pub struct Job {
    pub id: String,
    pub noisy: Image,
    pub clean: Option<Image>,
}

/// Trains a fresh copy of `pretrained` on each job's image, up to `workers`
/// at a time; reports come back in job order and do not depend on `workers`.
pub fn train_jobs(
    pretrained: &EncoderDecoder,
    jobs: &[Job],
    config: &TrainConfig,
    workers: usize,
) -> Result<Vec<TrainReport>> {
    with_pool(workers, || {
        jobs.par_iter()
            .map(|job| {
                let mut model = pretrained.clone();
                let mut rng = image_stream(config.seed, &job.id);
                train_single_image(&mut model, &job.noisy, config, job.clean.as_ref(), &mut rng)
            })
            .collect()
    })?
}

/// Trains a fresh copy of `pretrained` on every sample, up to `jobs` at a
/// time. Results come back in sample order and do not depend on `jobs`.
pub fn evaluate_samples(
    pretrained: &EncoderDecoder,
    samples: &[Sample],
    config: &TrainConfig,
    jobs: usize,
) -> Result<Vec<ImageRun>> {
    with_pool(jobs, || samples.par_iter().map(|s| run_one(pretrained, s, config)).collect())?
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "kebab-case")]
pub enum AblationAxis {
    Sigma(Vec<f64>),
    NormMode(Vec<NormMode>),
    Component(Vec<Component>),
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Sigma(_) => "sigma",
            AblationAxis::NormMode(_) => "norm-mode",
            AblationAxis::Component(_) => "component",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AblationAxis::Sigma(v) => v.len(),
            AblationAxis::NormMode(v) => v.len(),
            AblationAxis::Component(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self) -> Vec<String> {
        match self {
            AblationAxis::Sigma(v) => v.iter().map(|s| s.to_string()).collect(),
            AblationAxis::NormMode(v) => v.iter().map(|n| n.label().to_string()).collect(),
            AblationAxis::Component(v) => v.iter().map(|c| c.label().to_string()).collect(),
        }
    }

    fn apply(&self, index: usize, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            AblationAxis::Sigma(v) => cfg.sigma = v[index],
            AblationAxis::NormMode(v) => cfg.norm = v[index],
            AblationAxis::Component(v) => cfg.component = v[index],
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config(format!("ablation grid over {} has no values", self.name())));
        }
        let labels = self.labels();
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Config(format!("ablation value {l} is listed twice")));
            }
        }
        if let AblationAxis::Sigma(v) = self {
            if let Some(bad) = v.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
                return Err(Error::Config(format!("ablation sigma {bad} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_input_psnr: f64,
    pub per_image: Vec<MetricResult>,
}

impl AblationRow {
    fn aggregate(value: String, per_image: Vec<MetricResult>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean = |f: fn(&MetricResult) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Self {
            value,
            mean_psnr: mean(|m| m.psnr),
            mean_ssim: mean(|m| m.ssim),
            mean_input_psnr: mean(|m| m.input_psnr),
            per_image,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

impl AblationGrid {
    pub fn row(&self, value: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    /// Largest difference between any two rows' mean PSNR.
    pub fn psnr_spread(&self) -> f64 {
        let it = self.rows.iter().map(|r| r.mean_psnr);
        it.clone().fold(f64::NEG_INFINITY, f64::max) - it.fold(f64::INFINITY, f64::min)
    }

    /// One row per value: `value,psnr,ssim,input_psnr,images`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},psnr,ssim,input_psnr,images\n", self.axis);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{:.4},{}",
                r.value,
                r.mean_psnr,
                r.mean_ssim,
                r.mean_input_psnr,
                r.per_image.len()
            );
        }
        out
    }

    pub fn write(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        let (jp, cp) = (json_path.as_ref(), csv_path.as_ref());
        std::fs::write(jp, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(jp, e))?;
        std::fs::write(cp, self.to_csv()).map_err(|e| Error::io(cp, e))
    }
}

/// Per-image results for one configuration as a single-row table.
pub fn summarize(label: &str, runs: &[ImageRun]) -> AblationRow {
    AblationRow::aggregate(label.to_string(), runs.iter().map(|r| r.metrics.clone()).collect())
}

/// Reruns per-image training from `pretrained` for every axis value and
/// sample. Jobs are keyed by image id, so a value's row is exactly what a
/// plain evaluation with that configuration produces.
pub fn run_ablation_samples(
    axis: &AblationAxis,
    samples: &[Sample],
    base: &TrainConfig,
    pretrained: &EncoderDecoder,
    jobs: usize,
) -> Result<AblationGrid> {
    axis.validate()?;
    let configs: Vec<TrainConfig> = (0..axis.len()).map(|i| axis.apply(i, base)).collect();
    for c in &configs {
        c.validate()?;
    }
    let tasks: Vec<(usize, &Sample)> = (0..configs.len())
        .flat_map(|v| samples.iter().map(move |s| (v, s)))
        .collect();
    let results: Vec<MetricResult> = with_pool(jobs, || {
        tasks
            .par_iter()
            .map(|&(v, s)| run_one(pretrained, s, &configs[v]).map(|r| r.metrics))
            .collect::<Result<Vec<_>>>()
    })??;
    let mut chunks = results.chunks(samples.len().max(1));
    let rows = axis
        .labels()
        .into_iter()
        .map(|label| AblationRow::aggregate(label, chunks.next().map(<[_]>::to_vec).unwrap_or_default()))
        .collect();
    Ok(AblationGrid {
        axis: axis.name().to_string(),
        rows,
    })
}

/// [`run_ablation_samples`] over a manifest whose entries all carry clean references.
pub fn run_ablation(
    axis: &AblationAxis,
    dataset: &DatasetManifest,
    base: &TrainConfig,
    pretrained: &EncoderDecoder,
    jobs: usize,
) -> Result<AblationGrid> {
    axis.validate()?;
    if let Some(e) = dataset.entries.iter().find(|e| e.clean.is_none()) {
        return Err(Error::MissingReference(e.id.clone()));
    }
    let samples = Sample::from_manifest(dataset)?;
    run_ablation_samples(axis, &samples, base, pretrained, jobs)
}
