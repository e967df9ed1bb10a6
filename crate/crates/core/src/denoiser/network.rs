//! The encoder-decoder denoiser.
//!
//! Layout for depth `D` and base width `w` (all convolutions 3x3, each but
//! the last followed by the configured activation):
//!
//! ```text
//! enc0a C→w, enc0b w→w                     full resolution
//! pool, enc1 w→w ... pool, enc{D} w→w      down to 1/2^D (bottleneck)
//! up, cat skip, dec{k}a →2w, dec{k}b 2w→2w  for k = D-1 .. 1
//! up, cat input, dec0a →w, dec0b →w/2, dec0c →C
//! ```
//!
//! Skips are the pooled encoder outputs and the final stage concatenates
//! the raw input. With `residual`, the network output is added to its input;
//! with `mean_preserving`, each output channel is shifted to the mean of the
//! corresponding input channel (over the padded plane).
//! Inputs whose sides are not multiples of `2^D` are mirror-padded at the
//! bottom/right and the output is cropped back.

use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool2, avg_pool2_backward, concat, elu_backward, elu_inplace, leaky_relu_backward, leaky_relu_inplace,
    max_pool2, max_pool2_backward, split, upsample2, upsample2_backward, Conv3x3, Tensor,
};
use crate::error::{Error, Result};
use crate::image::{Image, Shape};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub channels: usize,
    pub base_width: usize,
    pub depth: usize,
    /// Add the input to the network output (global skip).
    pub residual: bool,
    /// Shift each output channel so its mean equals the input's. The
    /// global brightness of the prediction then cannot drift during
    /// per-image training.
    pub mean_preserving: bool,
    pub activation: Activation,
    pub pooling: Pooling,
}

/// Nonlinearity after every convolution but the last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// Slope 0.1 below zero.
    #[default]
    LeakyRelu,
    /// `e^x − 1` below zero; continuously differentiable.
    Elu,
}

/// 2x2 downsampling between encoder levels. Averaging keeps the network
/// free of the kinks max pooling introduces, so its first-order expansion
/// holds much more tightly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Max,
    #[default]
    Average,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            base_width: 12,
            depth: 3,
            residual: true,
            mean_preserving: true,
            activation: Activation::default(),
            pooling: Pooling::default(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("arch.channels must be 1 or 3, got {}", self.channels)));
        }
        if self.base_width < 2 {
            return Err(Error::Config("arch.base_width must be at least 2".into()));
        }
        if !(1..=6).contains(&self.depth) {
            return Err(Error::Config(format!("arch.depth must be in 1..=6, got {}", self.depth)));
        }
        Ok(())
    }

    fn multiple(&self) -> usize {
        1 << self.depth
    }

    /// Names of the convolution layers in storage order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["enc0a".to_string(), "enc0b".to_string()];
        names.extend((1..=self.depth).map(|k| format!("enc{k}")));
        for k in (1..self.depth).rev() {
            names.push(format!("dec{k}a"));
            names.push(format!("dec{k}b"));
        }
        names.extend(["dec0a", "dec0b", "dec0c"].map(String::from));
        names
    }

    /// `(cin, cout)` per layer, in the order of [`ArchConfig::layer_names`].
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let (c, w, d) = (self.channels, self.base_width, self.depth);
        let mut dims = vec![(c, w), (w, w)];
        dims.extend((1..=d).map(|_| (w, w)));
        let mut cur = w;
        for _ in (1..d).rev() {
            dims.push((cur + w, 2 * w));
            dims.push((2 * w, 2 * w));
            cur = 2 * w;
        }
        let half = (w / 2).max(1);
        dims.push((cur + c, w));
        dims.push((w, half));
        dims.push((half, c));
        dims
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderDecoder {
    config: ArchConfig,
    pub(crate) convs: Vec<Conv3x3>,
    mode: Mode,
}

/// Parameter gradients, laid out like the model's convolutions.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub(crate) convs: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Gradients {
    pub fn zeros_like(model: &EncoderDecoder) -> Self {
        Self {
            convs: model
                .convs
                .iter()
                .map(|c| (vec![0.0; c.weight.len()], vec![0.0; c.bias.len()]))
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f32) {
        for (w, b) in &mut self.convs {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f32]> {
        self.convs.iter().flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    pub fn is_finite(&self) -> bool {
        self.slices().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct Trace {
    input: Tensor,
    enc0a: Tensor,
    enc0b: Tensor,
    /// `pool_args[k]` pools level k into the skip of level k+1.
    pool_args: Vec<(Vec<u8>, usize, usize)>,
    /// Pooled skips, levels 1..=D.
    skips: Vec<Tensor>,
    /// Outputs of enc1..=encD (post-activation).
    enc: Vec<Tensor>,
    /// Per decoder stage: (concat input, a output, b output).
    dec: Vec<(Tensor, Tensor, Tensor)>,
    fin_in: Tensor,
    fin_a: Tensor,
    fin_b: Tensor,
}

impl EncoderDecoder {
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, "init");
        let convs = config
            .layer_dims()
            .into_iter()
            .map(|(cin, cout)| Conv3x3::init(cin, cout, &mut rng))
            .collect();
        Ok(Self {
            config,
            convs,
            mode: Mode::Eval,
        })
    }

    /// A model whose every weight and bias is zero. With a residual
    /// configuration this is exactly the identity map.
    pub fn zeroed(config: ArchConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for c in &mut m.convs {
            c.weight.fill(0.0);
            c.bias.fill(0.0);
        }
        Ok(m)
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    /// Weight then bias of every layer, in storage order.
    pub fn parameters(&self) -> impl Iterator<Item = &[f32]> {
        self.convs.iter().flat_map(|c| [c.weight.as_slice(), c.bias.as_slice()])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut [f32]> {
        self.convs
            .iter_mut()
            .flat_map(|c| [c.weight.as_mut_slice(), c.bias.as_mut_slice()])
    }

    pub fn parameters_finite(&self) -> bool {
        self.parameters().all(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Overwrites the final layer's bias (used to build degenerate fixtures).
    pub fn set_output_bias(&mut self, value: f32) {
        self.convs.last_mut().expect("network has layers").bias.fill(value);
    }

    fn n_enc(&self) -> usize {
        2 + self.config.depth
    }

    fn conv_act(&self, layer: usize, x: &Tensor) -> Tensor {
        let mut y = self.convs[layer].forward(x);
        match self.config.activation {
            Activation::LeakyRelu => leaky_relu_inplace(&mut y),
            Activation::Elu => elu_inplace(&mut y),
        }
        y
    }

    fn act_backward(&self, output: &Tensor, grad: &mut Tensor) {
        match self.config.activation {
            Activation::LeakyRelu => leaky_relu_backward(output, grad),
            Activation::Elu => elu_backward(output, grad),
        }
    }

    /// Pools `x`; the second value is the argmax record for max pooling.
    fn pool(&self, x: &Tensor) -> (Tensor, Vec<u8>) {
        match self.config.pooling {
            Pooling::Max => max_pool2(x),
            Pooling::Average => (avg_pool2(x), Vec::new()),
        }
    }

    /// Forward pass on a padded batch (sides multiple of 2^depth).
    pub(crate) fn forward_tensor(&self, x: &Tensor) -> (Tensor, Trace) {
        let d = self.config.depth;
        let enc0a = self.conv_act(0, x);
        let enc0b = self.conv_act(1, &enc0a);
        let mut pool_args = Vec::with_capacity(d);
        let mut skips = Vec::with_capacity(d);
        let mut enc = Vec::with_capacity(d);
        let mut level = enc0b.clone();
        for k in 1..=d {
            let (pooled, arg) = self.pool(&level);
            pool_args.push((arg, level.h, level.w));
            let e = self.conv_act(1 + k, &pooled);
            skips.push(pooled);
            enc.push(e.clone());
            level = e;
        }
        let mut cur = level;
        let mut dec = Vec::with_capacity(d.saturating_sub(1));
        let mut layer = self.n_enc();
        for k in (1..d).rev() {
            let up = upsample2(&cur);
            let cat = concat(&up, &skips[k - 1]);
            let a = self.conv_act(layer, &cat);
            let b = self.conv_act(layer + 1, &a);
            layer += 2;
            cur = b.clone();
            dec.push((cat, a, b));
        }
        let up = upsample2(&cur);
        let fin_in = concat(&up, x);
        let fin_a = self.conv_act(layer, &fin_in);
        let fin_b = self.conv_act(layer + 1, &fin_a);
        let mut out = self.convs[layer + 2].forward(&fin_b);
        if self.config.mean_preserving {
            let target = (!self.config.residual).then_some(x);
            shift_plane_means(&mut out, target);
        }
        if self.config.residual {
            out.data.iter_mut().zip(&x.data).for_each(|(o, i)| *o += i);
        }
        let trace = Trace {
            input: x.clone(),
            enc0a,
            enc0b,
            pool_args,
            skips,
            enc,
            dec,
            fin_in,
            fin_a,
            fin_b,
        };
        (out, trace)
    }

    /// Accumulates `d loss / d params` given `d loss / d output`.
    pub(crate) fn backward(&self, trace: &Trace, grad_out: &Tensor, grads: &mut Gradients) {
        self.backward_impl(trace, grad_out, grads, false);
    }

    /// As [`Self::backward`], additionally returning `d loss / d input`.
    pub(crate) fn backward_input(&self, trace: &Trace, grad_out: &Tensor, grads: &mut Gradients) -> Tensor {
        self.backward_impl(trace, grad_out, grads, true).expect("input grad")
    }

    fn backward_impl(&self, trace: &Trace, grad_out: &Tensor, grads: &mut Gradients, want_input: bool) -> Option<Tensor> {
        let d = self.config.depth;
        let n_layers = self.convs.len();
        let mut bw = |layer: usize, x: &Tensor, g: &Tensor, need: bool| {
            let (gw, gb) = &mut grads.convs[layer];
            self.convs[layer].backward(x, g, gw, gb, need)
        };

        // final stage
        let last = n_layers - 1;
        let projected;
        let grad_conv = match self.config.mean_preserving {
            true => {
                let mut g = grad_out.clone();
                shift_plane_means(&mut g, None);
                projected = g;
                &projected
            }
            false => grad_out,
        };
        let mut g = bw(last, &trace.fin_b, grad_conv, true).expect("input grad");
        self.act_backward(&trace.fin_b, &mut g);
        let mut g = bw(last - 1, &trace.fin_a, &g, true).expect("input grad");
        self.act_backward(&trace.fin_a, &mut g);
        let g = bw(last - 2, &trace.fin_in, &g, true).expect("input grad");
        let up_c = trace.fin_in.c - trace.input.c;
        let (g_up, g_raw) = split(&g, up_c);
        let mut g_cur = upsample2_backward(&g_up);

        // decoder stages are stored deepest first
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; d];
        let mut layer = last - 2;
        for i in (0..d - 1).rev() {
            let k = d - 1 - i;
            let (cat, a, b) = &trace.dec[i];
            layer -= 2;
            let mut gb_ = g_cur;
            self.act_backward(b, &mut gb_);
            let mut ga = bw(layer + 1, a, &gb_, true).expect("input grad");
            self.act_backward(a, &mut ga);
            let gcat = bw(layer, cat, &ga, true).expect("input grad");
            let up_c = cat.c - trace.skips[k - 1].c;
            let (g_up, g_skip) = split(&gcat, up_c);
            skip_grads[k - 1] = Some(g_skip);
            g_cur = upsample2_backward(&g_up);
        }

        // encoder, bottleneck upward
        for k in (1..=d).rev() {
            let e = &trace.enc[k - 1];
            let mut ge = g_cur;
            self.act_backward(e, &mut ge);
            let mut g_pool = bw(1 + k, &trace.skips[k - 1], &ge, true).expect("input grad");
            if let Some(extra) = skip_grads[k - 1].take() {
                g_pool.data.iter_mut().zip(&extra.data).for_each(|(a, b)| *a += b);
            }
            let (arg, h, w) = &trace.pool_args[k - 1];
            g_cur = match self.config.pooling {
                Pooling::Max => max_pool2_backward(&g_pool, arg, *h, *w),
                Pooling::Average => avg_pool2_backward(&g_pool),
            };
        }
        let mut g0b = g_cur;
        self.act_backward(&trace.enc0b, &mut g0b);
        let mut g0a = bw(1, &trace.enc0a, &g0b, true).expect("input grad");
        self.act_backward(&trace.enc0a, &mut g0a);
        let mut g_in = bw(0, &trace.input, &g0a, want_input)?;
        for (a, b) in g_in.data.iter_mut().zip(&g_raw.data) {
            *a += b;
        }
        if self.config.residual {
            g_in.data.iter_mut().zip(&grad_out.data).for_each(|(a, b)| *a += b);
        } else if self.config.mean_preserving {
            // d mean(x) / dx spreads the plane-summed gradient evenly
            let plane = g_in.h * g_in.w;
            for (gi, go) in g_in.data.chunks_mut(plane).zip(grad_out.data.chunks(plane)) {
                let m = go.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                gi.iter_mut().for_each(|v| *v += m as f32);
            }
        }
        Some(g_in)
    }

    fn check_channels(&self, shape: Shape) -> Result<()> {
        if shape.channels != self.config.channels {
            return Err(Error::Shape {
                expected: Shape::new(shape.height, shape.width, self.config.channels),
                found: shape,
            });
        }
        Ok(())
    }

    /// Padded side length for `n`.
    fn padded(&self, n: usize) -> usize {
        let m = self.config.multiple();
        n.div_ceil(m) * m
    }

    /// Stacks images (all of one shape) into a mirror-padded batch.
    pub(crate) fn to_batch(&self, images: &[&Image]) -> Result<Tensor> {
        let shape = images[0].shape();
        self.check_channels(shape)?;
        let (ph, pw) = (self.padded(shape.height), self.padded(shape.width));
        let mut t = Tensor::zeros(images.len(), shape.channels, ph, pw);
        for (s, img) in images.iter().enumerate() {
            img.ensure_shape(shape)?;
            let dst = t.sample_mut(s);
            for c in 0..shape.channels {
                let src = img.channel(c);
                for y in 0..ph {
                    let sy = mirror(y, shape.height);
                    for x in 0..pw {
                        let sx = mirror(x, shape.width);
                        dst[(c * ph + y) * pw + x] = src[sy * shape.width + sx] as f32;
                    }
                }
            }
        }
        Ok(t)
    }

    /// Crops sample `s` of a padded batch back to `shape`.
    pub(crate) fn from_batch(t: &Tensor, s: usize, shape: Shape) -> Result<Image> {
        let src = t.sample(s);
        Image::from_fn(shape, |c, y, x| src[(c * t.h + y) * t.w + x] as f64)
    }

    /// Embeds per-sample gradients w.r.t. cropped outputs into the padded layout.
    pub(crate) fn pad_grad(t_like: &Tensor, grads: &[&[f64]], shape: Shape) -> Tensor {
        let mut g = Tensor::zeros(t_like.n, t_like.c, t_like.h, t_like.w);
        let plane = shape.plane();
        for (s, grad) in grads.iter().enumerate() {
            let dst = g.sample_mut(s);
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        dst[(c * t_like.h + y) * t_like.w + x] =
                            grad[c * plane + y * shape.width + x] as f32;
                    }
                }
            }
        }
        g
    }

    /// Folds the gradient w.r.t. padded sample `s` back onto the unpadded
    /// image: each padded pixel contributes to the pixel it mirrors.
    pub(crate) fn fold_grad(t: &Tensor, s: usize, shape: Shape) -> Vec<f64> {
        let src = t.sample(s);
        let mut out = vec![0.0; shape.len()];
        let plane = shape.plane();
        for c in 0..shape.channels {
            for y in 0..t.h {
                let sy = mirror(y, shape.height);
                for x in 0..t.w {
                    let sx = mirror(x, shape.width);
                    out[c * plane + sy * shape.width + sx] += src[(c * t.h + y) * t.w + x] as f64;
                }
            }
        }
        out
    }

    /// Denoises several same-shaped images in one batch.
    pub fn forward_batch(&self, images: &[&Image]) -> Result<Vec<Image>> {
        let Some(first) = images.first() else {
            return Ok(Vec::new());
        };
        let shape = first.shape();
        let x = self.to_batch(images)?;
        let (out, _) = self.forward_tensor(&x);
        (0..images.len())
            .map(|s| Self::from_batch(&out, s, shape))
            .collect()
    }
}

/// Mirror index (edge not repeated) for padding past the end of an axis.
fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Removes each plane's mean, then adds the matching plane mean of `target`.
fn shift_plane_means(t: &mut Tensor, target: Option<&Tensor>) {
    let plane = t.h * t.w;
    let mean = |p: &[f32]| p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
    for (i, p) in t.data.chunks_mut(plane).enumerate() {
        let to = target.map_or(0.0, |x| mean(&x.data[i * plane..(i + 1) * plane]));
        let shift = (to - mean(p)) as f32;
        p.iter_mut().for_each(|v| *v += shift);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            channels: 1,
            base_width: 4,
            depth: 2,
            residual: true,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn mirror_reflects() {
        assert_eq!((0..8).map(|i| mirror(i, 5)).collect::<Vec<_>>(), [0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(mirror(5, 1), 0);
        assert_eq!((0..6).map(|i| mirror(i, 2)).collect::<Vec<_>>(), [0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn layer_tables_agree() {
        for depth in 1..=4 {
            let cfg = ArchConfig { depth, ..ArchConfig::default() };
            assert_eq!(cfg.layer_names().len(), cfg.layer_dims().len());
            let m = EncoderDecoder::new(cfg, 1).unwrap();
            assert_eq!(m.convs.len(), cfg.layer_names().len());
        }
    }

    #[test]
    fn zeroed_residual_is_identity() {
        let m = EncoderDecoder::zeroed(tiny()).unwrap();
        let img = Image::from_fn(Shape::new(7, 5, 1), |_, y, x| (y * 5 + x) as f64 / 40.0).unwrap();
        let out = m.forward_batch(&[&img]).unwrap().pop().unwrap();
        assert!(out.max_abs_diff(&img).unwrap() < 1e-6);
    }

    fn param(m: &mut EncoderDecoder, layer: usize, is_bias: bool, idx: usize) -> &mut f32 {
        let conv = &mut m.convs[layer];
        if is_bias {
            &mut conv.bias[idx]
        } else {
            &mut conv.weight[idx]
        }
    }

    // Finite-difference check of the analytic parameter gradient on a scalar
    // objective <F(x), g>. Points where the two step sizes disagree sit on a
    // ReLU or max-pool kink and are skipped; at most a few may be.
    #[test]
    fn backward_matches_finite_differences() {
        use Activation::*;
        use Pooling::*;
        for (depth, residual, mean_preserving, activation, pooling) in [
            (1, true, true, Elu, Average),
            (2, false, true, LeakyRelu, Max),
            (3, true, false, Elu, Max),
            (2, false, false, LeakyRelu, Average),
        ] {
            let cfg = ArchConfig { depth, residual, mean_preserving, activation, pooling, ..tiny() };
            let mut model = EncoderDecoder::new(cfg, 7).unwrap();
            let mut rng = RngStream::new(7, "fd");
            let img = Image::from_fn(Shape::new(8, 8, 1), |_, _, _| rng.uniform(0.0, 1.0)).unwrap();
            let gvec: Vec<f64> = (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let objective = |m: &EncoderDecoder| -> f64 {
                let out = m.forward_batch(&[&img]).unwrap().pop().unwrap();
                out.as_slice().iter().zip(&gvec).map(|(a, b)| a * b).sum()
            };
            let x = model.to_batch(&[&img]).unwrap();
            let (out, trace) = model.forward_tensor(&x);
            let g = EncoderDecoder::pad_grad(&out, &[&gvec], img.shape());
            let mut grads = Gradients::zeros_like(&model);
            model.backward(&trace, &g, &mut grads);

            let (mut checked, mut skipped) = (0, 0);
            for layer in 0..model.convs.len() {
                let n_w = model.convs[layer].weight.len();
                // (is_bias, index)
                let probes = [(false, 0), (false, 5), (false, n_w / 2), (false, n_w - 1), (true, 0)];
                for (is_bias, idx) in probes {
                    let analytic = if is_bias { grads.convs[layer].1[idx] } else { grads.convs[layer].0[idx] } as f64;
                    let mut numeric = |h: f32| {
                        let orig = *param(&mut model, layer, is_bias, idx);
                        *param(&mut model, layer, is_bias, idx) = orig + h;
                        let up = objective(&model);
                        *param(&mut model, layer, is_bias, idx) = orig - h;
                        let down = objective(&model);
                        *param(&mut model, layer, is_bias, idx) = orig;
                        (up - down) / (2.0 * h as f64)
                    };
                    let (coarse, fine) = (numeric(1e-3), numeric(2.5e-4));
                    let tol = 2e-2 * analytic.abs().max(fine.abs()).max(1e-1);
                    if (coarse - fine).abs() > tol {
                        skipped += 1;
                        continue;
                    }
                    assert!(
                        (analytic - fine).abs() <= tol,
                        "depth {depth} layer {layer} {} {idx}: {analytic} vs {fine}",
                        if is_bias { "bias" } else { "weight" }
                    );
                    checked += 1;
                }
            }
            assert!(skipped * 5 <= checked, "depth {depth}: {skipped} kinks vs {checked} checked");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for (residual, mean_preserving, activation) in [
            (true, true, Activation::Elu),
            (false, true, Activation::LeakyRelu),
            (true, false, Activation::LeakyRelu),
            (false, false, Activation::Elu),
        ] {
            let model = EncoderDecoder::new(ArchConfig { residual, mean_preserving, activation, ..tiny() }, 5).unwrap();
            let mut rng = RngStream::new(5, "fd-input");
            let shape = Shape::new(8, 8, 1);
            let img = Image::from_fn(shape, |_, _, _| rng.uniform(0.0, 1.0)).unwrap();
            let dir = Image::from_fn(shape, |_, _, _| rng.uniform(-1.0, 1.0)).unwrap();
            let gvec: Vec<f64> = (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let objective = |t: f64| -> f64 {
                let x = img.add_scaled(&dir, t).unwrap();
                let out = model.forward_batch(&[&x]).unwrap().pop().unwrap();
                out.as_slice().iter().zip(&gvec).map(|(a, b)| a * b).sum()
            };
            let x = model.to_batch(&[&img]).unwrap();
            let (out, trace) = model.forward_tensor(&x);
            let g = EncoderDecoder::pad_grad(&out, &[&gvec], shape);
            let g_in = model.backward_input(&trace, &g, &mut Gradients::zeros_like(&model));
            let analytic: f64 = g_in.data.iter().zip(dir.as_slice()).map(|(&a, b)| a as f64 * b).sum();
            let numeric = (objective(1e-3) - objective(-1e-3)) / 2e-3;
            assert!(
                (analytic - numeric).abs() <= 2e-2 * numeric.abs().max(1.0),
                "residual {residual} mean {mean_preserving}: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn mean_preserving_output_keeps_channel_means() {
        let cfg = ArchConfig { channels: 3, residual: false, ..tiny() };
        let model = EncoderDecoder::new(cfg, 2).unwrap();
        let mut rng = RngStream::new(2, "means");
        let img = Image::from_fn(Shape::new(16, 16, 3), |c, _, _| 0.2 * c as f64 + rng.uniform(0.0, 0.3)).unwrap();
        let out = model.forward_batch(&[&img]).unwrap().pop().unwrap();
        for c in 0..3 {
            let mean = |i: &Image| i.channel(c).iter().sum::<f64>() / 256.0;
            assert!((mean(&out) - mean(&img)).abs() < 1e-5);
        }
    }
}
