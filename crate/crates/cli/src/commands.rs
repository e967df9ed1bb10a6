use std::fs;
use std::path::{Path, PathBuf};

use p2n_core::dataset::{scan_dataset, DatasetManifest, Layout, ManifestEntry};
use p2n_core::denoiser::{load_checkpoint, pretrain_gaussian, save_checkpoint, EncoderDecoder};
use p2n_core::engine::{CollapseStatus, Component, NormMode, TrainReport};
use p2n_core::evaluation::{
    convergence_report, evaluate_samples, run_ablation, summarize, AblationAxis, ConvergenceReport, Job,
    MetricResult, Sample,
};
use p2n_core::image::{load_image, save_image, BitDepth, Image};
use p2n_core::noise::{add_noise, residual_stats_pairs, ResidualStats};
use p2n_core::{synth, RngStream};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, EXIT_COLLAPSE, EXIT_OK};

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path.display(), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path.display(), e))
}

fn is_manifest(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// A single image, a manifest JSON, or a directory (paired when it has a
/// `noisy/` subdirectory, flat otherwise). `clean` only pairs with a single image.
pub fn resolve_inputs(input: &Path, clean: Option<&Path>) -> Result<DatasetManifest, CliError> {
    let manifest = if input.is_dir() || is_manifest(input) {
        if clean.is_some() {
            return Err(CliError::usage(
                "paths.clean: only applies to a single input image; manifests and directories carry their own references",
            ));
        }
        if input.is_dir() {
            let layout = if input.join("noisy").is_dir() { Layout::Paired } else { Layout::Flat };
            scan_dataset(input, layout)?
        } else {
            DatasetManifest::load(input)?
        }
    } else {
        let id = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        DatasetManifest {
            root: input.parent().map(Path::to_owned).unwrap_or_default(),
            entries: vec![ManifestEntry {
                id,
                noisy: input.to_owned(),
                clean: clean.map(Path::to_owned),
            }],
        }
    };
    if manifest.is_empty() {
        return Err(CliError::usage(format!("paths.input: no images found in {}", input.display())));
    }
    Ok(manifest)
}

/// Clean training images: a directory (its `gt/` subdirectory when present)
/// or a manifest, whose entries contribute their reference or themselves.
fn load_corpus(path: &Path) -> Result<Vec<Image>, CliError> {
    let manifest = if is_manifest(path) {
        DatasetManifest::load(path)?
    } else {
        let gt = path.join("gt");
        scan_dataset(if gt.is_dir() { gt } else { path.to_owned() }, Layout::Flat)?
    };
    if manifest.is_empty() {
        return Err(CliError::usage(format!("paths.corpus: no images found in {}", path.display())));
    }
    Ok(manifest
        .entries
        .iter()
        .map(|e| e.load_reference_or_self())
        .collect::<Result<_, _>>()?)
}

fn load_model(cfg: &RunConfig) -> Result<EncoderDecoder, CliError> {
    let path = cfg.require("paths.checkpoint", &cfg.paths.checkpoint, "--checkpoint")?;
    Ok(load_checkpoint(path)?)
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<u8, CliError> {
    let corpus_path = cfg.require("paths.corpus", &cfg.paths.corpus, "--corpus")?;
    let corpus = load_corpus(corpus_path)?;
    let model = match &cfg.paths.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => EncoderDecoder::new(cfg.arch, cfg.pretrain.seed)?,
    };
    log::info!(
        "pretraining {} parameters on {} images for {} iterations",
        model.parameter_count(),
        corpus.len(),
        cfg.pretrain.iterations
    );
    let outcome = pretrain_gaussian(model, &corpus, &cfg.pretrain)?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&outcome.model, &ckpt)?;
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in outcome.loss_history.iter().enumerate() {
        csv.push_str(&format!("{i},{l:e}\n"));
    }
    write_text(&out.join("pretrain_loss.csv"), &csv)?;
    write_json(&out.join("config.json"), cfg)?;
    log::info!("wrote {}", ckpt.display());
    Ok(EXIT_OK)
}

/// Everything recorded about one denoised image.
#[derive(Serialize)]
struct ImageRecord<'a> {
    image_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<MetricResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    convergence: Option<ConvergenceReport>,
    report: &'a TrainReport,
}

#[derive(Serialize)]
struct SummaryRow {
    image_id: String,
    collapse: CollapseStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gain: Option<f64>,
}

#[derive(Serialize)]
struct Summary {
    images: Vec<SummaryRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_gain: Option<f64>,
    collapsed: usize,
}

#[derive(Serialize)]
struct Timing {
    wall_time_secs: f64,
}

fn collapse_exit(collapsed: usize) -> u8 {
    if collapsed > 0 {
        log::warn!("{collapsed} image(s) ended in a trivial solution");
        EXIT_COLLAPSE
    } else {
        EXIT_OK
    }
}

pub fn denoise(cfg: &RunConfig, out: &Path) -> Result<u8, CliError> {
    let input = cfg.require("paths.input", &cfg.paths.input, "--input")?;
    let manifest = resolve_inputs(input, cfg.paths.clean.as_deref())?;
    let model = load_model(cfg)?;
    let jobs = manifest
        .entries
        .iter()
        .map(|e| {
            Ok(Job {
                id: e.id.clone(),
                noisy: e.load_noisy()?,
                clean: e.clean.as_ref().map(load_image).transpose()?,
            })
        })
        .collect::<Result<Vec<_>, p2n_core::Error>>()?;
    log::info!("denoising {} image(s) with {} worker(s)", jobs.len(), cfg.jobs);
    let reports = p2n_core::evaluation::train_jobs(&model, &jobs, &cfg.train, cfg.jobs)?;

    let mut rows = Vec::with_capacity(jobs.len());
    for (job, report) in jobs.iter().zip(&reports) {
        let denoised = report.final_denoised();
        save_image(denoised, out.join(format!("{}.png", job.id)), BitDepth::Sixteen)?;
        let metrics = job
            .clean
            .as_ref()
            .map(|c| MetricResult::compute(&job.id, denoised, &job.noisy, c))
            .transpose()?;
        let convergence = metrics.as_ref().map(|_| convergence_report(report)).transpose()?;
        let record = ImageRecord {
            image_id: &job.id,
            metrics: metrics.clone(),
            convergence,
            report,
        };
        write_json(&out.join(format!("{}.report.json", job.id)), &record)?;
        write_json(
            &out.join(format!("{}.timing.json", job.id)),
            &Timing { wall_time_secs: report.wall_time_secs },
        )?;
        if let Some(m) = &metrics {
            log::info!("{}: {:.2} dB -> {:.2} dB", job.id, m.input_psnr, m.psnr);
        }
        rows.push(SummaryRow {
            image_id: job.id.clone(),
            collapse: report.collapse,
            psnr: metrics.as_ref().map(|m| m.psnr),
            ssim: metrics.as_ref().map(|m| m.ssim),
            input_psnr: metrics.as_ref().map(|m| m.input_psnr),
            gain: metrics.as_ref().map(|m| m.gain()),
        });
    }
    let gains: Vec<f64> = rows.iter().filter_map(|r| r.gain).collect();
    let collapsed = rows.iter().filter(|r| r.collapse.is_collapsed()).count();
    let summary = Summary {
        mean_gain: (!gains.is_empty()).then(|| gains.iter().sum::<f64>() / gains.len() as f64),
        images: rows,
        collapsed,
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_json(&out.join("config.json"), cfg)?;
    Ok(collapse_exit(collapsed))
}

#[derive(Serialize)]
struct EvalRow {
    #[serde(flatten)]
    metrics: MetricResult,
    gain: f64,
    convergence: ConvergenceReport,
    collapse: CollapseStatus,
}

#[derive(Serialize)]
struct EvalTable {
    mean_psnr: f64,
    mean_ssim: f64,
    mean_input_psnr: f64,
    mean_gain: f64,
    per_image: Vec<EvalRow>,
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<u8, CliError> {
    let input = cfg.require("paths.input", &cfg.paths.input, "--input")?;
    let manifest = resolve_inputs(input, cfg.paths.clean.as_deref())?;
    let samples = Sample::from_manifest(&manifest)?;
    let model = load_model(cfg)?;
    let runs = evaluate_samples(&model, &samples, &cfg.train, cfg.jobs)?;
    let agg = summarize("all", &runs);
    let per_image = runs
        .iter()
        .map(|r| {
            Ok(EvalRow {
                metrics: r.metrics.clone(),
                gain: r.metrics.gain(),
                convergence: convergence_report(&r.report)?,
                collapse: r.report.collapse,
            })
        })
        .collect::<Result<Vec<_>, p2n_core::Error>>()?;
    let mut csv = String::from("image,psnr,ssim,input_psnr,gain,plateau_iteration,post_plateau_range_db,collapse\n");
    for r in &per_image {
        csv.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{},{:.4},{}\n",
            r.metrics.image_id,
            r.metrics.psnr,
            r.metrics.ssim,
            r.metrics.input_psnr,
            r.gain,
            r.convergence.plateau_iteration,
            r.convergence.post_plateau_range_db,
            serde_json::to_value(r.collapse)?.as_str().unwrap_or_default()
        ));
    }
    let collapsed = per_image.iter().filter(|r| r.collapse.is_collapsed()).count();
    let table = EvalTable {
        mean_psnr: agg.mean_psnr,
        mean_ssim: agg.mean_ssim,
        mean_input_psnr: agg.mean_input_psnr,
        mean_gain: agg.mean_psnr - agg.mean_input_psnr,
        per_image,
    };
    log::info!(
        "mean PSNR {:.2} dB (input {:.2} dB), SSIM {:.4}",
        table.mean_psnr,
        table.mean_input_psnr,
        table.mean_ssim
    );
    write_text(&out.join("metrics.csv"), &csv)?;
    write_json(&out.join("metrics.json"), &table)?;
    write_json(&out.join("config.json"), cfg)?;
    Ok(collapse_exit(collapsed))
}

/// Builds the ablation axis from `--axis` and `--values`.
pub fn parse_axis(name: &str, values: &[String]) -> Result<AblationAxis, CliError> {
    let values: Vec<&str> = values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    let axis = match name {
        "sigma" => AblationAxis::Sigma(
            values
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| CliError::usage(format!("values: `{v}` is not a number"))))
                .collect::<Result<_, _>>()?,
        ),
        "norm-mode" | "norm" => AblationAxis::NormMode(
            values
                .iter()
                .map(|v| v.parse::<NormMode>().map_err(CliError::from))
                .collect::<Result<_, _>>()?,
        ),
        "component" => AblationAxis::Component(
            values
                .iter()
                .map(|v| v.parse::<Component>().map_err(CliError::from))
                .collect::<Result<_, _>>()?,
        ),
        other => {
            return Err(CliError::usage(format!(
                "axis: expected sigma, norm-mode or component, got `{other}`"
            )))
        }
    };
    axis.validate()?;
    Ok(axis)
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<u8, CliError> {
    let axis = cfg
        .ablation
        .clone()
        .ok_or_else(|| CliError::usage("ablation: required (set it in the config or pass --axis and --values)"))?;
    axis.validate()?;
    let input = cfg.require("paths.input", &cfg.paths.input, "--input")?;
    let manifest = resolve_inputs(input, cfg.paths.clean.as_deref())?;
    let model = load_model(cfg)?;
    let grid = run_ablation(&axis, &manifest, &cfg.train, &model, cfg.jobs)?;
    for row in &grid.rows {
        log::info!("{} = {}: {:.2} dB", grid.axis, row.value, row.mean_psnr);
    }
    grid.write(out.join("ablation.json"), out.join("ablation.csv"))?;
    write_json(&out.join("config.json"), cfg)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct NoiseReport {
    #[serde(flatten)]
    stats: ResidualStats,
    /// `3·std/√N`: the bound on |mean| expected of zero-mean noise.
    mean_bound: f64,
    max_symmetry_deviation: f64,
}

pub fn analyze_noise(cfg: &RunConfig, out: &Path) -> Result<u8, CliError> {
    let input = cfg.require("paths.input", &cfg.paths.input, "--input")?;
    let manifest = resolve_inputs(input, cfg.paths.clean.as_deref())?;
    let pairs = manifest
        .entries
        .iter()
        .map(|e| Ok((e.load_noisy()?, e.load_clean()?)))
        .collect::<Result<Vec<_>, p2n_core::Error>>()?;
    let refs: Vec<(&Image, &Image)> = pairs.iter().map(|(n, c)| (n, c)).collect();
    let stats = residual_stats_pairs(&refs)?;
    let report = NoiseReport {
        mean_bound: 3.0 * stats.std / (stats.sample_count as f64).sqrt(),
        max_symmetry_deviation: stats.max_symmetry_deviation(),
        stats,
    };
    log::info!(
        "residual mean {:.3e} (bound {:.3e}), std {:.4}, skewness {:.4}",
        report.stats.mean,
        report.mean_bound,
        report.stats.std,
        report.stats.skewness
    );
    report.stats.write_histogram_csv(out.join("noise_histogram.csv"))?;
    write_json(&out.join("noise_stats.json"), &report)?;
    Ok(EXIT_OK)
}

/// Procedural clean images under `gt/`, their noisy versions under `noisy/`,
/// and a `manifest.json` tying them together.
pub fn synth_corpus(cfg: &RunConfig, out: &Path, count: usize, size: usize, channels: usize) -> Result<u8, CliError> {
    if count == 0 || size == 0 || !(channels == 1 || channels == 3) {
        return Err(CliError::usage("count and size must be positive; channels must be 1 or 3"));
    }
    let seed = cfg.seed.unwrap_or(0);
    let (gt_dir, noisy_dir) = (out.join("gt"), out.join("noisy"));
    for d in [&gt_dir, &noisy_dir] {
        fs::create_dir_all(d).map_err(|e| CliError::io(d.display(), e))?;
    }
    let clean = synth::corpus(count, size, size, channels, seed, "synth")?;
    let mut entries = Vec::with_capacity(count);
    for (i, c) in clean.iter().enumerate() {
        let id = format!("img_{i:03}");
        let noisy = add_noise(c, &cfg.noise, &mut RngStream::new(seed, format!("noise/{id}")))?;
        let name = PathBuf::from(format!("{id}.png"));
        save_image(c, gt_dir.join(&name), BitDepth::Sixteen)?;
        save_image(&noisy, noisy_dir.join(&name), BitDepth::Sixteen)?;
        entries.push(ManifestEntry {
            id,
            noisy: Path::new("noisy").join(&name),
            clean: Some(Path::new("gt").join(&name)),
        });
    }
    let manifest = DatasetManifest { root: PathBuf::new(), entries };
    write_json(&out.join("manifest.json"), &manifest)?;
    log::info!("wrote {count} image pairs to {}", out.display());
    Ok(EXIT_OK)
}
