//! Supervised Gaussian pretraining on a clean corpus.

use serde::{Deserialize, Serialize};

use super::network::{EncoderDecoder, Gradients, Mode};
use super::optim::{AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Noise standard deviation is drawn uniformly from `[lo, hi]` per crop.
    pub noise_sigma_range: [f64; 2],
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            noise_sigma_range: [5.0 / 255.0, 75.0 / 255.0],
            iterations: 2000,
            learning_rate: 1e-3,
            batch_size: 4,
            crop_size: 48,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.noise_sigma_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "pretrain.noise_sigma_range must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("pretrain.learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be at least 1".into()));
        }
        if self.crop_size == 0 {
            return Err(Error::Config("pretrain.crop_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: EncoderDecoder,
    /// Mean squared error of each batch, before that batch's update.
    pub loss_history: Vec<f64>,
}

/// Trains `model` to map `clean + N(0, σ²)` crops back to `clean`.
///
/// The learning rate follows a cosine decay from `learning_rate` to a tenth
/// of it over the budget.
pub fn pretrain_gaussian(
    mut model: EncoderDecoder,
    corpus: &[Image],
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    let channels = model.config().channels;
    if let Some(bad) = corpus.iter().find(|i| i.channels() != channels) {
        return Err(Error::Config(format!(
            "corpus image has {} channels, model expects {channels}",
            bad.channels()
        )));
    }
    let side_h = corpus.iter().map(|i| i.height()).min().unwrap_or(1);
    let side_w = corpus.iter().map(|i| i.width()).min().unwrap_or(1);
    let (ch, cw) = (config.crop_size.min(side_h), config.crop_size.min(side_w));

    let mut rng = RngStream::new(config.seed, "pretrain");
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &model,
    );
    let [lo, hi] = config.noise_sigma_range;
    let mut loss_history = Vec::with_capacity(config.iterations);
    model.set_mode(Mode::Train);
    for it in 0..config.iterations {
        let mut clean = Vec::with_capacity(config.batch_size);
        let mut noisy = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let src = &corpus[rng.below(corpus.len())];
            let top = rng.below(src.height() - ch + 1);
            let left = rng.below(src.width() - cw + 1);
            let mut crop = src.crop(top, left, ch, cw)?;
            if rng.coin() {
                crop = crop.flip_horizontal();
            }
            if rng.coin() {
                crop = crop.flip_vertical();
            }
            let sigma = rng.uniform(lo, hi);
            noisy.push(crop.map(|v| v + sigma * rng.standard_normal())?);
            clean.push(crop);
        }
        let refs: Vec<&Image> = noisy.iter().collect();
        let x = model.to_batch(&refs)?;
        let (out, trace) = model.forward_tensor(&x);
        let shape = clean[0].shape();
        let total = (shape.len() * clean.len()) as f64;
        let mut loss = 0.0;
        let grads_per_sample: Vec<Vec<f64>> = clean
            .iter()
            .enumerate()
            .map(|(s, c)| {
                let pred = EncoderDecoder::from_batch(&out, s, shape).expect("finite output");
                pred.as_slice()
                    .iter()
                    .zip(c.as_slice())
                    .map(|(p, t)| {
                        let d = p - t;
                        loss += d * d;
                        2.0 * d / total
                    })
                    .collect()
            })
            .collect();
        loss /= total;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration: it, loss });
        }
        loss_history.push(loss);
        let grad_refs: Vec<&[f64]> = grads_per_sample.iter().map(|g| g.as_slice()).collect();
        let g_out = EncoderDecoder::pad_grad(&out, &grad_refs, shape);
        let mut grads = Gradients::zeros_like(&model);
        model.backward(&trace, &g_out, &mut grads);
        let progress = it as f64 / config.iterations as f64;
        let lr = config.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        opt.step_with_lr(&mut model, &grads, lr);
        if it % 200 == 0 {
            log::debug!("pretrain iteration {it}: loss {loss:.6}");
        }
    }
    model.set_mode(Mode::Eval);
    if !model.parameters_finite() {
        return Err(Error::Divergence {
            iteration: config.iterations,
            loss: f64::NAN,
        });
    }
    Ok(PretrainOutcome {
        model,
        loss_history,
    })
}
