//! Per-image self-supervised training.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::collapse::{classify_output, CollapseStatus, CollapseThresholds};
use super::loss::{dcs_loss_grad, gamma_schedule, NormMode};
use super::rdc::{draw_scales, renoise, RenoisedPair};
use crate::denoiser::{forward, AdamW, AdamWConfig, EncoderDecoder, Gradients};
use crate::error::{Error, Result};
use crate::image::{Image, NoiseResidual};
use crate::metrics::psnr;
use crate::rng::RngStream;

/// Variants used by the component ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    /// Renoise with the predicted noise, supervise the two outputs against each other.
    #[default]
    Full,
    /// Renoise with fresh i.i.d. Gaussian noise of the predicted noise's level.
    GaussianRenoise,
    /// Supervise `F(y_p)` directly against the noisy negative image `y_n`.
    NoisyTarget,
}

impl Component {
    pub fn label(self) -> &'static str {
        match self {
            Component::Full => "full",
            Component::GaussianRenoise => "gaussian-renoise",
            Component::NoisyTarget => "noisy-target",
        }
    }
}

impl std::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Component::Full),
            "gaussian-renoise" => Ok(Component::GaussianRenoise),
            "noisy-target" => Ok(Component::NoisyTarget),
            other => Err(Error::Parameter(format!(
                "component must be one of full, gaussian-renoise, noisy-target; got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Width of the scale distribution `N(1, sigma)`.
    pub sigma: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub epsilon: f64,
    pub norm: NormMode,
    pub seed: u64,
    pub pairs_per_iteration: usize,
    pub component: Component,
    pub collapse: CollapseThresholds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma: 0.75,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            iterations: 300,
            gamma_start: 2.0,
            gamma_end: 1.5,
            epsilon: 1e-8,
            norm: NormMode::Varying,
            seed: 0,
            pairs_per_iteration: 1,
            component: Component::Full,
            collapse: CollapseThresholds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("train.sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.gamma_end > 0.0 && self.gamma_start >= self.gamma_end && self.gamma_start.is_finite()) {
            return bad(format!(
                "train.gamma_start >= train.gamma_end > 0 required, got {} and {}",
                self.gamma_start, self.gamma_end
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("train.epsilon must be > 0, got {}", self.epsilon));
        }
        if self.pairs_per_iteration == 0 {
            return bad("train.pairs_per_iteration must be at least 1".into());
        }
        self.collapse.validate()
    }

    /// Exponent used at `iteration` (0-based) under the configured norm.
    pub fn gamma_at(&self, iteration: usize) -> Result<f64> {
        match self.norm {
            NormMode::Varying => gamma_schedule(iteration, self.iterations.max(1), self.gamma_start, self.gamma_end),
            NormMode::Fixed2 => Ok(2.0),
            NormMode::Fixed15 => Ok(1.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean consistency loss per iteration, before that iteration's update.
    pub loss_history: Vec<f64>,
    /// PSNR of the prediction after each update, when a reference is known.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub psnr_history: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub initial_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_psnr: Option<f64>,
    pub collapse: CollapseStatus,
    pub collapse_flag: bool,
    /// Kept out of the serialized report so that reports are reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
    #[serde(skip)]
    pub final_denoised: Option<Image>,
}

impl TrainReport {
    pub fn final_denoised(&self) -> &Image {
        self.final_denoised.as_ref().expect("report produced by training carries its output")
    }
}

/// One pair's scale draws; `unit_noise` (standard normal) replaces the
/// predicted noise in the Gaussian-renoise variant.
pub(crate) struct PairDraw {
    pub sigma_n: f64,
    pub sigma_p: f64,
    pub unit_noise: Option<NoiseResidual>,
}

impl PairDraw {
    fn sample(sigma: f64, component: Component, shape: crate::image::Shape, rng: &mut RngStream) -> Result<Self> {
        let (sigma_n, sigma_p) = draw_scales(sigma, rng)?;
        let unit_noise = match component {
            Component::GaussianRenoise => Some(NoiseResidual::from_fn(shape, |_, _, _| rng.standard_normal())?),
            _ => None,
        };
        Ok(Self { sigma_n, sigma_p, unit_noise })
    }
}

/// Loss of one pair plus its gradients w.r.t. `y_p` and `y_n`; the
/// parameter gradient through the two forward passes goes into `grads`.
fn pair_loss_grad(
    model: &EncoderDecoder,
    pair: &RenoisedPair,
    component: Component,
    gamma: f64,
    epsilon: f64,
    grads: &mut Gradients,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let shape = pair.y_p.shape();
    if component == Component::NoisyTarget {
        let batch = model.to_batch(&[&pair.y_p])?;
        let (out, trace) = model.forward_tensor(&batch);
        let d_p = EncoderDecoder::from_batch(&out, 0, shape)?;
        let (l, g) = dcs_loss_grad(&d_p, &pair.y_n, gamma, epsilon)?;
        let g_in = model.backward_input(&trace, &EncoderDecoder::pad_grad(&out, &[&g], shape), grads);
        let g_n = g.iter().map(|v| -v).collect();
        return Ok((l, EncoderDecoder::fold_grad(&g_in, 0, shape), g_n));
    }
    let batch = model.to_batch(&[&pair.y_p, &pair.y_n])?;
    let (out, trace) = model.forward_tensor(&batch);
    let d_p = EncoderDecoder::from_batch(&out, 0, shape)?;
    let d_n = EncoderDecoder::from_batch(&out, 1, shape)?;
    let (l, g) = dcs_loss_grad(&d_p, &d_n, gamma, epsilon)?;
    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
    let g_in = model.backward_input(&trace, &EncoderDecoder::pad_grad(&out, &[&g, &neg], shape), grads);
    Ok((l, EncoderDecoder::fold_grad(&g_in, 0, shape), EncoderDecoder::fold_grad(&g_in, 1, shape)))
}

/// Mean loss over `draws` and its full parameter gradient. The renoised
/// images are built from `x̂ = F(y)`, so the gradient also flows back through
/// `x̂` and `n̂ = y − x̂`; treating them as constants lets the low-frequency
/// error of `x̂` feed on itself. Returns `x̂` alongside the loss.
pub(crate) fn consistency_loss_grad(
    model: &EncoderDecoder,
    y: &Image,
    draws: &[PairDraw],
    component: Component,
    gamma: f64,
    epsilon: f64,
    grads: &mut Gradients,
) -> Result<(f64, Image)> {
    let shape = y.shape();
    let input = model.to_batch(&[y])?;
    let (pred, trace) = model.forward_tensor(&input);
    let x_hat = EncoderDecoder::from_batch(&pred, 0, shape)?;
    let n_hat = y.residual(&x_hat)?;
    let mut grad_x = vec![0.0; shape.len()];
    let mut loss = 0.0;
    for d in draws {
        let level = n_hat.std();
        let noise = match &d.unit_noise {
            Some(z) => z.scale(level)?,
            None => n_hat.clone(),
        };
        let pair = renoise(x_hat.clone(), noise, d.sigma_n, d.sigma_p)?;
        let (l, g_p, g_n) = pair_loss_grad(model, &pair, component, gamma, epsilon, grads)?;
        loss += l;
        // y_p = x̂ + σ_n·n, y_n = x̂ − σ_p·n, and dn/dx̂ = −1 when n = n̂
        match &d.unit_noise {
            None => {
                let (kp, kn) = (1.0 - d.sigma_n, 1.0 + d.sigma_p);
                for ((gx, a), b) in grad_x.iter_mut().zip(&g_p).zip(&g_n) {
                    *gx += kp * a + kn * b;
                }
            }
            Some(z) => {
                // n = std(n̂)·z, and d std(n̂)/d n̂_i = (n̂_i − mean) / (N·std)
                let d_level: f64 = z
                    .as_slice()
                    .iter()
                    .zip(g_p.iter().zip(&g_n))
                    .map(|(z, (a, b))| z * (d.sigma_n * a - d.sigma_p * b))
                    .sum();
                let mean = n_hat.mean();
                let k = if level > 0.0 { d_level / (shape.len() as f64 * level) } else { 0.0 };
                for (((gx, a), b), n) in grad_x.iter_mut().zip(&g_p).zip(&g_n).zip(n_hat.as_slice()) {
                    *gx += a + b - k * (n - mean);
                }
            }
        }
    }
    model.backward(&trace, &EncoderDecoder::pad_grad(&pred, &[&grad_x], shape), grads);
    if draws.len() > 1 {
        grads.scale(1.0 / draws.len() as f32);
    }
    Ok((loss / draws.len() as f64, x_hat))
}

/// A prediction that overflowed means the weights blew up.
fn predict(model: &EncoderDecoder, y: &Image, iteration: usize) -> Result<Image> {
    forward(model, y).map_err(|e| match e {
        Error::NonFinite(_) => Error::Divergence { iteration, loss: f64::NAN },
        e => e,
    })
}

/// Fits `model` to the single noisy image `y` and returns the report; the
/// trained weights stay in `model`. `rng` drives every scale and noise draw.
///
/// The model is expected to be a pretrained Gaussian denoiser — from random
/// weights the objective is happily minimized by trivial maps.
pub fn train_single_image(
    model: &mut EncoderDecoder,
    y: &Image,
    config: &TrainConfig,
    clean_ref: Option<&Image>,
    rng: &mut RngStream,
) -> Result<TrainReport> {
    config.validate()?;
    if let Some(c) = clean_ref {
        c.ensure_shape(y.shape())?;
    }
    let started = Instant::now();
    let shape = y.shape();
    let pairs = config.pairs_per_iteration;
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        model,
    );
    let mut loss_history = Vec::with_capacity(config.iterations);
    let mut psnr_history = clean_ref.map(|_| Vec::with_capacity(config.iterations));
    let mut initial_psnr = None;
    let diverged = |iteration| Error::Divergence { iteration, loss: f64::NAN };

    for it in 0..config.iterations {
        let gamma = config.gamma_at(it)?;
        let draws = (0..pairs)
            .map(|_| PairDraw::sample(config.sigma, config.component, shape, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = Gradients::zeros_like(model);
        let (loss, x_hat) = consistency_loss_grad(model, y, &draws, config.component, gamma, config.epsilon, &mut grads)
            .map_err(|e| match e {
                Error::NonFinite(_) => diverged(it),
                e => e,
            })?;
        if let Some(c) = clean_ref {
            let p = psnr(&x_hat, c, 1.0)?;
            match (it, psnr_history.as_mut()) {
                (0, _) => initial_psnr = Some(p),
                (_, Some(h)) => h.push(p),
                _ => {}
            }
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence { iteration: it, loss });
        }
        loss_history.push(loss);
        opt.step(model, &grads);
        if it % 50 == 0 {
            log::debug!("iteration {it}: loss {loss:.4e} gamma {gamma:.3}");
        }
    }

    let final_denoised = predict(model, y, config.iterations)?;
    let final_psnr = clean_ref.map(|c| psnr(&final_denoised, c, 1.0)).transpose()?;
    if config.iterations == 0 {
        initial_psnr = final_psnr;
    } else if let (Some(h), Some(p)) = (psnr_history.as_mut(), final_psnr) {
        h.push(p);
    }
    let collapse = classify_output(&final_denoised, y, &config.collapse)?;
    if collapse.is_collapsed() {
        log::warn!("training finished in a trivial solution: {collapse:?}");
    }
    Ok(TrainReport {
        loss_history,
        psnr_history,
        initial_psnr,
        final_psnr,
        collapse,
        collapse_flag: collapse.is_collapsed(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        final_denoised: Some(final_denoised),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ArchConfig;
    use crate::image::Shape;
    use crate::noise::{add_noise, NoiseSpec};
    use crate::synth;

    fn tiny_model() -> EncoderDecoder {
        EncoderDecoder::new(ArchConfig { channels: 1, base_width: 4, depth: 2, residual: true, ..ArchConfig::default() }, 7).unwrap()
    }

    fn fixture() -> (Image, Image) {
        let clean = synth::corpus(1, 16, 16, 1, 3, "train").unwrap().remove(0);
        let y = add_noise(&clean, &NoiseSpec::Gaussian { sigma: 0.1 }, &mut RngStream::new(3, "n")).unwrap();
        (clean, y)
    }

    #[test]
    fn zero_budget_returns_the_initial_prediction() {
        let (clean, y) = fixture();
        let mut m = tiny_model();
        let before = forward(&m, &y).unwrap();
        let cfg = TrainConfig { iterations: 0, ..TrainConfig::default() };
        let r = train_single_image(&mut m, &y, &cfg, Some(&clean), &mut RngStream::new(1, "t")).unwrap();
        assert!(r.loss_history.is_empty());
        assert_eq!(r.psnr_history.as_deref(), Some(&[][..]));
        assert_eq!(r.final_denoised(), &before);
    }

    #[test]
    fn histories_have_one_entry_per_iteration() {
        let (clean, y) = fixture();
        let mut m = tiny_model();
        let cfg = TrainConfig { iterations: 7, pairs_per_iteration: 2, ..TrainConfig::default() };
        let r = train_single_image(&mut m, &y, &cfg, Some(&clean), &mut RngStream::new(1, "t")).unwrap();
        assert_eq!(r.loss_history.len(), 7);
        assert_eq!(r.psnr_history.as_ref().unwrap().len(), 7);
        assert!(r.loss_history.iter().all(|l| l.is_finite() && *l > 0.0));
        assert_eq!(r.final_psnr, r.psnr_history.as_ref().unwrap().last().copied());
        let r = train_single_image(&mut tiny_model(), &y, &cfg, None, &mut RngStream::new(1, "t")).unwrap();
        assert!(r.psnr_history.is_none() && r.final_psnr.is_none());
    }

    #[test]
    fn training_is_deterministic() {
        let (clean, y) = fixture();
        for component in [Component::Full, Component::GaussianRenoise, Component::NoisyTarget] {
            let cfg = TrainConfig { iterations: 5, component, ..TrainConfig::default() };
            let run = || {
                let mut m = tiny_model();
                let r = train_single_image(&mut m, &y, &cfg, Some(&clean), &mut RngStream::new(9, "d")).unwrap();
                (r, m)
            };
            let (a, ma) = run();
            let (b, mb) = run();
            assert_eq!(a.loss_history, b.loss_history);
            assert_eq!(a.final_denoised, b.final_denoised);
            assert!(ma.parameters().zip(mb.parameters()).all(|(x, y)| x == y));
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
    }

    #[test]
    fn updates_reduce_the_loss_with_a_large_step() {
        let (_, y) = fixture();
        let mut m = tiny_model();
        let cfg = TrainConfig { iterations: 40, learning_rate: 3e-3, sigma: 0.0, norm: NormMode::Fixed2, ..TrainConfig::default() };
        let r = train_single_image(&mut m, &y, &cfg, None, &mut RngStream::new(2, "t")).unwrap();
        let head: f64 = r.loss_history[..5].iter().sum();
        let tail: f64 = r.loss_history[35..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn rejects_bad_configuration_and_shapes() {
        let (clean, y) = fixture();
        let mut m = tiny_model();
        let mut rng = RngStream::new(1, "t");
        for cfg in [
            TrainConfig { sigma: -1.0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { gamma_start: 1.0, gamma_end: 1.5, ..TrainConfig::default() },
            TrainConfig { epsilon: 0.0, ..TrainConfig::default() },
            TrainConfig { pairs_per_iteration: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(train_single_image(&mut m, &y, &cfg, None, &mut rng), Err(Error::Config(_))));
        }
        let other = clean.crop(0, 0, 8, 8).unwrap();
        let cfg = TrainConfig { iterations: 1, ..TrainConfig::default() };
        assert!(matches!(train_single_image(&mut m, &y, &cfg, Some(&other), &mut rng), Err(Error::Shape { .. })));
    }

    #[test]
    fn divergence_names_the_iteration() {
        let (_, y) = fixture();
        let mut m = tiny_model();
        let cfg = TrainConfig { iterations: 3, learning_rate: 1e30, gamma_start: 2.0, norm: NormMode::Fixed2, ..TrainConfig::default() };
        match train_single_image(&mut m, &y, &cfg, None, &mut RngStream::new(1, "t")) {
            Err(Error::Divergence { iteration, .. }) => assert!(iteration >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    // Directional derivative along the analytic gradient must equal its squared
    // norm; the loss is re-evaluated from scratch, renoised inputs included.
    #[test]
    fn gradient_matches_directional_difference() {
        let (_, y) = fixture();
        let model = tiny_model();
        for component in [Component::Full, Component::GaussianRenoise, Component::NoisyTarget] {
            let mut rng = RngStream::new(4, "g");
            let draws: Vec<PairDraw> = (0..2).map(|_| PairDraw::sample(0.75, component, y.shape(), &mut rng).unwrap()).collect();
            let eval = |m: &EncoderDecoder, g: &mut Gradients| consistency_loss_grad(m, &y, &draws, component, 2.0, 1e-8, g).unwrap().0;
            let mut grads = Gradients::zeros_like(&model);
            let l0 = eval(&model, &mut grads);
            let norm2: f64 = grads.slices().flatten().map(|&g| (g as f64).powi(2)).sum();
            let loss_at = |t: f32| {
                let mut m = model.clone();
                for (p, g) in m.parameters_mut().zip(grads.slices()) {
                    p.iter_mut().zip(g).for_each(|(p, g)| *p -= t * g);
                }
                eval(&m, &mut Gradients::zeros_like(&m))
            };
            let h = 1e-2 / norm2.sqrt() as f32;
            let numeric = (loss_at(-h) - loss_at(h)) / (2.0 * h as f64);
            assert!((numeric / norm2 - 1.0).abs() < 0.05, "{component:?}: {numeric} vs {norm2}");
            assert!(loss_at(h) < l0);
        }
    }

    #[test]
    fn gradient_reaches_odd_sized_inputs() {
        // 13×11 is mirror-padded to 16×12; the padded border must fold back.
        let mut rng = RngStream::new(6, "o");
        let y = Image::from_fn(Shape::new(13, 11, 1), |_, _, _| rng.uniform(0.0, 1.0)).unwrap();
        let model = tiny_model();
        let draws = [PairDraw { sigma_n: 1.4, sigma_p: 0.3, unit_noise: None }];
        let eval = |m: &EncoderDecoder, g: &mut Gradients| consistency_loss_grad(m, &y, &draws, Component::Full, 2.0, 1e-8, g).unwrap().0;
        let mut grads = Gradients::zeros_like(&model);
        eval(&model, &mut grads);
        let norm2: f64 = grads.slices().flatten().map(|&g| (g as f64).powi(2)).sum();
        let h = 1e-2 / norm2.sqrt() as f32;
        let loss_at = |t: f32| {
            let mut m = model.clone();
            for (p, g) in m.parameters_mut().zip(grads.slices()) {
                p.iter_mut().zip(g).for_each(|(p, g)| *p -= t * g);
            }
            eval(&m, &mut Gradients::zeros_like(&m))
        };
        let numeric = (loss_at(-h) - loss_at(h)) / (2.0 * h as f64);
        assert!((numeric / norm2 - 1.0).abs() < 0.05, "{numeric} vs {norm2}");
    }

    #[test]
    fn gamma_follows_the_norm_mode() {
        let cfg = TrainConfig { iterations: 10, ..TrainConfig::default() };
        assert_eq!(cfg.gamma_at(0).unwrap(), 2.0);
        assert_eq!(cfg.gamma_at(5).unwrap(), 1.75);
        let fixed = TrainConfig { norm: NormMode::Fixed15, ..cfg.clone() };
        assert_eq!(fixed.gamma_at(5).unwrap(), 1.5);
        let json = serde_json::to_value(&TrainConfig::default()).unwrap();
        assert_eq!(json["norm"], "varying");
        let parsed: TrainConfig = serde_json::from_str(r#"{"norm": "fixed-1.5", "sigma": 0.25}"#).unwrap();
        assert_eq!((parsed.norm, parsed.sigma, parsed.iterations), (NormMode::Fixed15, 0.25, 300));
    }
}
