//! Procedural clean images: smooth backgrounds with overlapping shapes,
//! soft edges and a few striped textures. Used as a stand-in corpus for
//! pretraining and desk-scale experiments.

use crate::error::Result;
use crate::image::{Image, Shape};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug)]
enum Fill {
    Flat([f64; 3]),
    Gradient { from: [f64; 3], to: [f64; 3], dir: (f64, f64) },
    Stripes { a: [f64; 3], b: [f64; 3], freq: f64, dir: (f64, f64) },
}

#[derive(Clone, Copy, Debug)]
enum Region {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64, angle: f64 },
}

fn color(rng: &mut RngStream, channels: usize) -> [f64; 3] {
    let base = [rng.uniform(0.08, 0.92), rng.uniform(0.08, 0.92), rng.uniform(0.08, 0.92)];
    if channels == 1 {
        [base[0]; 3]
    } else {
        base
    }
}

fn unit(rng: &mut RngStream) -> (f64, f64) {
    let a = rng.uniform(0.0, std::f64::consts::TAU);
    (a.sin(), a.cos())
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

impl Fill {
    fn random(rng: &mut RngStream, channels: usize) -> Self {
        let roll = rng.uniform(0.0, 1.0);
        if roll < 0.5 {
            Fill::Flat(color(rng, channels))
        } else if roll < 0.85 {
            Fill::Gradient {
                from: color(rng, channels),
                to: color(rng, channels),
                dir: unit(rng),
            }
        } else {
            Fill::Stripes {
                a: color(rng, channels),
                b: color(rng, channels),
                freq: rng.uniform(0.04, 0.15),
                dir: unit(rng),
            }
        }
    }

    fn at(&self, y: f64, x: f64, size: f64) -> [f64; 3] {
        match *self {
            Fill::Flat(c) => c,
            Fill::Gradient { from, to, dir } => {
                let t = ((dir.0 * y + dir.1 * x) / size + 1.0) / 2.0;
                mix(from, to, t.clamp(0.0, 1.0))
            }
            Fill::Stripes { a, b, freq, dir } => {
                let phase = (dir.0 * y + dir.1 * x) * freq * std::f64::consts::TAU;
                mix(a, b, 0.5 + 0.5 * phase.sin())
            }
        }
    }
}

impl Region {
    fn random(rng: &mut RngStream, h: f64, w: f64) -> Self {
        let size = h.min(w);
        let (cy, cx) = (rng.uniform(0.0, h), rng.uniform(0.0, w));
        let angle = rng.uniform(0.0, std::f64::consts::PI);
        let (a, b) = (rng.uniform(0.05, 0.35) * size, rng.uniform(0.05, 0.35) * size);
        if rng.coin() {
            Region::Ellipse { cy, cx, ry: a, rx: b, angle }
        } else {
            Region::Rect { cy, cx, hy: a, hx: b, angle }
        }
    }

    /// Approximate signed distance in pixels (negative inside).
    fn distance(&self, y: f64, x: f64) -> f64 {
        let rotate = |cy: f64, cx: f64, angle: f64| {
            let (dy, dx) = (y - cy, x - cx);
            let (s, c) = angle.sin_cos();
            (c * dy - s * dx, s * dy + c * dx)
        };
        match *self {
            Region::Ellipse { cy, cx, ry, rx, angle } => {
                let (u, v) = rotate(cy, cx, angle);
                let r = ((u / ry).powi(2) + (v / rx).powi(2)).sqrt();
                (r - 1.0) * ry.min(rx)
            }
            Region::Rect { cy, cx, hy, hx, angle } => {
                let (u, v) = rotate(cy, cx, angle);
                (u.abs() - hy).max(v.abs() - hx)
            }
        }
    }
}

/// One procedural image, deterministic in `rng`.
pub fn clean_image(height: usize, width: usize, channels: usize, rng: &mut RngStream) -> Result<Image> {
    let (h, w) = (height as f64, width as f64);
    let size = h.max(w);
    let background = Fill::Gradient {
        from: color(rng, channels),
        to: color(rng, channels),
        dir: unit(rng),
    };
    let count = 6 + rng.below(8);
    let shapes: Vec<(Region, Fill)> = (0..count)
        .map(|_| (Region::random(rng, h, w), Fill::random(rng, channels)))
        .collect();
    let mut planes = vec![0.0; height * width * 3];
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut px = background.at(fy - h / 2.0, fx - w / 2.0, size);
            for (region, fill) in &shapes {
                // one-pixel soft edge
                let cover = (0.5 - region.distance(fy, fx)).clamp(0.0, 1.0);
                if cover > 0.0 {
                    px = mix(px, fill.at(fy, fx, size), cover);
                }
            }
            for c in 0..3 {
                planes[(c * height + y) * width + x] = px[c];
            }
        }
    }
    planes.truncate(height * width * channels);
    Image::new(Shape::new(height, width, channels), planes)
}

/// `count` images drawn from stream `(seed, label)`.
pub fn corpus(count: usize, height: usize, width: usize, channels: usize, seed: u64, label: &str) -> Result<Vec<Image>> {
    let mut rng = RngStream::new(seed, label);
    (0..count).map(|_| clean_image(height, width, channels, &mut rng)).collect()
}
