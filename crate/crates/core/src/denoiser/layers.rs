//! Batched NCHW `f32` tensors and the handful of layers the encoder-decoder
//! needs, each with an explicit backward pass.

use crate::rng::RngStream;

pub(crate) const LEAKY_SLOPE: f32 = 0.1;

/// Target size (in floats) of one im2col block.
const COL_BLOCK: usize = 1 << 18;

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let s = self.sample_len();
        &mut self.data[i * s..(i + 1) * s]
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    /// `cout x (cin * 9)`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds for the furthest element each operand touches.
    debug_assert!((m - 1) * rsa + (k.max(1) - 1) * csa < a.len() || k == 0);
    debug_assert!((k.max(1) - 1) * rsb + (n - 1) * csb < b.len() || k == 0);
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted extents keep every access inside the slices, and
    // `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Fills `col` with the 3x3 patches of output rows `y0..y0+rows`.
/// Row `(ci*9 + ky*3 + kx)` holds input pixel `(y+ky-1, x+kx-1)` of channel `ci`.
fn im2col(input: &[f32], c: usize, h: usize, w: usize, y0: usize, rows: usize, col: &mut [f32]) {
    let n = rows * w;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut col[((ci * 9) + ky * 3 + kx) * n..][..n];
                for r in 0..rows {
                    let out_row = &mut dst[r * w..(r + 1) * w];
                    let sy = (y0 + r + ky) as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out_row[0] = 0.0;
                            out_row[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out_row.copy_from_slice(src),
                        _ => {
                            out_row[..w - 1].copy_from_slice(&src[1..]);
                            out_row[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back into `grad_input`.
fn col2im(col: &[f32], c: usize, h: usize, w: usize, y0: usize, rows: usize, grad_input: &mut [f32]) {
    let n = rows * w;
    for ci in 0..c {
        let plane = &mut grad_input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let src = &col[((ci * 9) + ky * 3 + kx) * n..][..n];
                for r in 0..rows {
                    let row = &src[r * w..(r + 1) * w];
                    let sy = (y0 + r + ky) as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&row[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(row).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&row[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

impl Conv3x3 {
    /// Kaiming-uniform weights for a leaky-ReLU successor, zero bias.
    pub fn init(cin: usize, cout: usize, rng: &mut RngStream) -> Self {
        let fan_in = (cin * 9) as f64;
        let gain = (2.0 / (1.0 + (LEAKY_SLOPE as f64).powi(2))).sqrt();
        let bound = gain * (3.0 / fan_in).sqrt();
        let weight = (0..cout * cin * 9)
            .map(|_| rng.uniform(-bound, bound) as f32)
            .collect();
        Self {
            cin,
            cout,
            weight,
            bias: vec![0.0; cout],
        }
    }

    fn k(&self) -> usize {
        self.cin * 9
    }

    fn block_rows(&self, w: usize, h: usize) -> usize {
        (COL_BLOCK / (self.k() * w)).clamp(1, h)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let k = self.k();
        let rows_per = self.block_rows(w, h);
        let mut col = vec![0.0f32; k * rows_per * w];
        let mut out = Tensor::zeros(x.n, self.cout, h, w);
        for s in 0..x.n {
            let input = x.sample(s);
            let y = out.sample_mut(s);
            for (co, plane) in y.chunks_mut(hw).enumerate() {
                plane.fill(self.bias[co]);
            }
            let mut y0 = 0;
            while y0 < h {
                let rows = rows_per.min(h - y0);
                let n = rows * w;
                im2col(input, self.cin, h, w, y0, rows, &mut col);
                sgemm(
                    self.cout,
                    k,
                    n,
                    &self.weight,
                    (k, 1),
                    &col,
                    (n, 1),
                    1.0,
                    &mut y[y0 * w..],
                    (hw, 1),
                );
                y0 += rows;
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad_w`/`grad_b`; returns the
    /// input gradient when `need_input_grad`.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        grad_w: &mut [f32],
        grad_b: &mut [f32],
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let k = self.k();
        let rows_per = self.block_rows(w, h);
        let mut col = vec![0.0f32; k * rows_per * w];
        let mut dcol = if need_input_grad {
            vec![0.0f32; k * rows_per * w]
        } else {
            Vec::new()
        };
        let mut grad_in = need_input_grad.then(|| Tensor::zeros(x.n, x.c, h, w));
        for s in 0..x.n {
            let input = x.sample(s);
            let dy = grad_out.sample(s);
            for (co, plane) in dy.chunks(hw).enumerate() {
                grad_b[co] += plane.iter().sum::<f32>();
            }
            let mut y0 = 0;
            while y0 < h {
                let rows = rows_per.min(h - y0);
                let n = rows * w;
                im2col(input, self.cin, h, w, y0, rows, &mut col);
                // dW += dY · colᵀ
                sgemm(
                    self.cout,
                    n,
                    k,
                    &dy[y0 * w..],
                    (hw, 1),
                    &col,
                    (1, n),
                    1.0,
                    grad_w,
                    (k, 1),
                );
                if let Some(gi) = grad_in.as_mut() {
                    // dcol = Wᵀ · dY
                    sgemm(
                        k,
                        self.cout,
                        n,
                        &self.weight,
                        (1, k),
                        &dy[y0 * w..],
                        (hw, 1),
                        0.0,
                        &mut dcol,
                        (n, 1),
                    );
                    col2im(&dcol, self.cin, h, w, y0, rows, gi.sample_mut(s));
                }
                y0 += rows;
            }
        }
        grad_in
    }
}

pub(crate) fn leaky_relu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward through a leaky ReLU given its (post-activation) output.
pub(crate) fn leaky_relu_backward(output: &Tensor, grad: &mut Tensor) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// ELU with unit scale: `x` for `x ≥ 0`, `e^x − 1` below. Continuously
/// differentiable, unlike the leaky ReLU.
pub(crate) fn elu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = v.exp_m1();
        }
    }
}

/// Backward through an ELU given its output: the slope below zero is `y + 1`.
pub(crate) fn elu_backward(output: &Tensor, grad: &mut Tensor) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y < 0.0 {
            *g *= y + 1.0;
        }
    }
}

pub(crate) fn avg_pool2(x: &Tensor) -> Tensor {
    debug_assert!(x.h % 2 == 0 && x.w % 2 == 0);
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * x.w + 2 * ox;
                let sum = src[base] + src[base + 1] + src[base + x.w] + src[base + x.w + 1];
                out.data[p * oh * ow + oy * ow + ox] = 0.25 * sum;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(grad_out: &Tensor) -> Tensor {
    let (h, w) = (2 * grad_out.h, 2 * grad_out.w);
    let mut grad = Tensor::zeros(grad_out.n, grad_out.c, h, w);
    for p in 0..grad_out.n * grad_out.c {
        let src = &grad_out.data[p * grad_out.h * grad_out.w..(p + 1) * grad_out.h * grad_out.w];
        let dst = &mut grad.data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * src[(y / 2) * grad_out.w + x / 2];
            }
        }
    }
    grad
}

/// 2x2 max pooling; also returns the winning offset (0..4) per output element.
pub(crate) fn max_pool2(x: &Tensor) -> (Tensor, Vec<u8>) {
    debug_assert!(x.h % 2 == 0 && x.w % 2 == 0);
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; out.data.len()];
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = 2 * oy * x.w + 2 * ox;
                let cands = [src[base], src[base + 1], src[base + x.w], src[base + x.w + 1]];
                let mut best = 0;
                for i in 1..4 {
                    if cands[i] > cands[best] {
                        best = i;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out.data[o] = cands[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool2_backward(grad_out: &Tensor, arg: &[u8], h: usize, w: usize) -> Tensor {
    let mut grad = Tensor::zeros(grad_out.n, grad_out.c, h, w);
    let (oh, ow) = (grad_out.h, grad_out.w);
    for p in 0..grad_out.n * grad_out.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = p * oh * ow + oy * ow + ox;
                let a = arg[o] as usize;
                let (dy, dx) = (a / 2, a % 2);
                grad.data[p * h * w + (2 * oy + dy) * w + 2 * ox + dx] += grad_out.data[o];
            }
        }
    }
    grad
}

pub(crate) fn upsample2(x: &Tensor) -> Tensor {
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.h * x.w..(p + 1) * x.h * x.w];
        let dst = &mut out.data[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let srow = &src[(y / 2) * x.w..(y / 2 + 1) * x.w];
            for (xo, d) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *d = srow[xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let (h, w) = (grad_out.h / 2, grad_out.w / 2);
    let mut grad = Tensor::zeros(grad_out.n, grad_out.c, h, w);
    for p in 0..grad_out.n * grad_out.c {
        let src = &grad_out.data[p * grad_out.h * grad_out.w..(p + 1) * grad_out.h * grad_out.w];
        let dst = &mut grad.data[p * h * w..(p + 1) * h * w];
        for y in 0..grad_out.h {
            for x in 0..grad_out.w {
                dst[(y / 2) * w + x / 2] += src[y * grad_out.w + x];
            }
        }
    }
    grad
}

/// Channel concatenation `[a, b]`.
pub(crate) fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for s in 0..a.n {
        let dst = out.sample_mut(s);
        let (left, right) = dst.split_at_mut(a.sample_len());
        left.copy_from_slice(a.sample(s));
        right.copy_from_slice(b.sample(s));
    }
    out
}

/// Splits a gradient of `[a, b]` back into the two parts.
pub(crate) fn split(grad: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let mut a = Tensor::zeros(grad.n, ca, grad.h, grad.w);
    let mut b = Tensor::zeros(grad.n, grad.c - ca, grad.h, grad.w);
    for s in 0..grad.n {
        let src = grad.sample(s);
        let (l, r) = src.split_at(a.sample_len());
        a.sample_mut(s).copy_from_slice(l);
        b.sample_mut(s).copy_from_slice(r);
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, rng: &mut RngStream) -> Tensor {
        let mut t = Tensor::zeros(n, c, h, w);
        t.data.iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0) as f32);
        t
    }

    // Direct 3x3 convolution, the oracle for the im2col path.
    fn naive_conv(conv: &Conv3x3, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(x.n, conv.cout, x.h, x.w);
        for s in 0..x.n {
            for co in 0..conv.cout {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut acc = conv.bias[co] as f64;
                        for ci in 0..conv.cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let v = x.data[((s * x.c + ci) * x.h + sy as usize) * x.w + sx as usize];
                                    acc += (conv.weight[co * conv.cin * 9 + ci * 9 + ky * 3 + kx] * v) as f64;
                                }
                            }
                        }
                        out.data[((s * conv.cout + co) * x.h + y) * x.w + xx] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = RngStream::new(1, "conv");
        let mut conv = Conv3x3::init(3, 4, &mut rng);
        conv.bias.iter_mut().for_each(|b| *b = rng.uniform(-0.5, 0.5) as f32);
        for (h, w) in [(5, 7), (1, 1), (8, 3), (40, 40)] {
            let x = random_tensor(2, 3, h, w, &mut rng);
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5, "{h}x{w}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x) - b, g> == <x, dx(g)> and == <W, dW(g)> for a linear map.
        let mut rng = RngStream::new(2, "adj");
        let conv = Conv3x3::init(2, 3, &mut rng);
        let x = random_tensor(2, 2, 9, 6, &mut rng);
        let g = random_tensor(2, 3, 9, 6, &mut rng);
        let y = conv.forward(&x);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| (a * b) as f64).sum();
        let mut gw = vec![0.0; conv.weight.len()];
        let mut gb = vec![0.0; conv.bias.len()];
        let dx = conv.backward(&x, &g, &mut gw, &mut gb, true).unwrap();
        let via_x: f64 = dx.data.iter().zip(&x.data).map(|(a, b)| (a * b) as f64).sum();
        let via_w: f64 = gw.iter().zip(&conv.weight).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - via_x).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {via_x}");
        assert!((lhs - via_w).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {via_w}");
        let gsum: f32 = g.data.iter().sum();
        assert!((gb.iter().sum::<f32>() - gsum).abs() < 1e-3);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = RngStream::new(3, "pool");
        let x = random_tensor(1, 2, 6, 4, &mut rng);
        let (p, arg) = max_pool2(&x);
        assert_eq!((p.h, p.w), (3, 2));
        assert_eq!(p.data[0], x.data[0].max(x.data[1]).max(x.data[4]).max(x.data[5]));
        let g = random_tensor(1, 2, 3, 2, &mut rng);
        let dx = max_pool2_backward(&g, &arg, 6, 4);
        assert!((dx.data.iter().sum::<f32>() - g.data.iter().sum::<f32>()).abs() < 1e-5);

        let u = upsample2(&g);
        let gu = random_tensor(1, 2, 6, 4, &mut rng);
        let lhs: f32 = u.data.iter().zip(&gu.data).map(|(a, b)| a * b).sum();
        let back = upsample2_backward(&gu);
        let rhs: f32 = back.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn avg_pool_is_adjoint_to_its_backward() {
        let mut rng = RngStream::new(5, "avg");
        let x = random_tensor(2, 3, 6, 8, &mut rng);
        let p = avg_pool2(&x);
        assert_eq!((p.h, p.w), (3, 4));
        assert!((p.data[0] - 0.25 * (x.data[0] + x.data[1] + x.data[8] + x.data[9])).abs() < 1e-6);
        let g = random_tensor(2, 3, 3, 4, &mut rng);
        let lhs: f32 = p.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = avg_pool2_backward(&g).data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn elu_slope_matches_finite_differences() {
        for x in [-3.0f32, -0.7, -1e-3, 0.0, 0.4, 2.0] {
            let mut t = Tensor::zeros(1, 1, 1, 1);
            t.data[0] = x;
            elu_inplace(&mut t);
            let mut g = Tensor::zeros(1, 1, 1, 1);
            g.data[0] = 1.0;
            elu_backward(&t, &mut g);
            let h = 1e-3f64;
            let f = |v: f64| if v < 0.0 { v.exp_m1() } else { v };
            let fd = (f(x as f64 + h) - f(x as f64 - h)) / (2.0 * h);
            assert!((g.data[0] as f64 - fd).abs() < 1e-3, "x={x}: {} vs {fd}", g.data[0]);
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = RngStream::new(4, "cat");
        let a = random_tensor(2, 1, 3, 3, &mut rng);
        let b = random_tensor(2, 2, 3, 3, &mut rng);
        let (a2, b2) = split(&concat(&a, &b), 1);
        assert_eq!((a2, b2), (a, b));
    }
}
