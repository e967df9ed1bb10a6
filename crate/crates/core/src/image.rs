//! Raster types and PNG/TIFF I/O.
//!
//! Rasters are stored planar (channel-major, then row-major), so channel `c`
//! occupies one contiguous `height * width` slice. Arithmetic never clamps:
//! the only clamp site is [`save_image`].

use std::fmt;
use std::marker::PhantomData;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Parameter(format!("raster {self} has an empty dimension")));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Parameter(format!(
                "raster {self} must have 1 or 3 channels"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Marker for what a raster's values mean.
pub trait RasterKind: Clone + fmt::Debug + Send + Sync + 'static {}

/// Intensities, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Intensity;

/// Signed noise values, e.g. `noisy - clean`.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual;

impl RasterKind for Intensity {}
impl RasterKind for Residual {}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster<K: RasterKind> {
    shape: Shape,
    data: Vec<f64>,
    kind: PhantomData<K>,
}

pub type Image = Raster<Intensity>;
pub type NoiseResidual = Raster<Residual>;

impl<K: RasterKind> Raster<K> {
    /// Wraps planar data. Fails on bad dimensions, wrong length, or non-finite values.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::Parameter(format!(
                "raster {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "raster value at index {i} is not finite"
            )));
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Self {
            shape,
            data,
            kind: PhantomData,
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn ensure_shape(&self, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Shape {
                expected,
                found: self.shape,
            });
        }
        Ok(())
    }

    /// Elementwise map into another raster kind; the result must stay finite.
    pub fn map_into<L: RasterKind>(&self, mut f: impl FnMut(f64) -> f64) -> Result<Raster<L>> {
        Raster::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn map(&self, f: impl FnMut(f64) -> f64) -> Result<Self> {
        self.map_into(f)
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        self.map(|v| v * s)
    }

    /// `self + s * other`, unclamped.
    pub fn add_scaled<L: RasterKind>(&self, other: &Raster<L>, s: f64) -> Result<Self> {
        self.zip_with(other, |a, b| a + s * b)
    }

    pub fn zip_with<L: RasterKind, M: RasterKind>(
        &self,
        other: &Raster<L>,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Raster<M>> {
        other.ensure_shape(self.shape)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Raster::new(self.shape, data)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation over all elements.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64;
        var.sqrt()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    /// Largest elementwise absolute difference to a raster of the same shape.
    pub fn max_abs_diff<L: RasterKind>(&self, other: &Raster<L>) -> Result<f64> {
        other.ensure_shape(self.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.shape.height || left + width > self.shape.width {
            return Err(Error::Parameter(format!(
                "crop {height}x{width}+{top}+{left} exceeds raster {}",
                self.shape
            )));
        }
        let shape = Shape::new(height, width, self.shape.channels);
        Self::from_fn(shape, |c, y, x| self.get(c, top + y, left + x))
    }

    pub fn flip_horizontal(&self) -> Self {
        let s = self.shape;
        let mut data = Vec::with_capacity(s.len());
        for row in self.data.chunks(s.width) {
            data.extend(row.iter().rev());
        }
        Self::from_parts(s, data)
    }

    pub fn flip_vertical(&self) -> Self {
        let s = self.shape;
        let mut data = Vec::with_capacity(s.len());
        for plane in self.data.chunks(s.plane()) {
            for row in plane.chunks(s.width).rev() {
                data.extend_from_slice(row);
            }
        }
        Self::from_parts(s, data)
    }
}

impl Image {
    /// `self - other` as a residual (e.g. noisy minus clean).
    pub fn residual(&self, other: &Image) -> Result<NoiseResidual> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Copy with every value clamped to `[0, 1]`. Used only at export.
    pub fn clamped(&self) -> Self {
        Self::from_parts(self.shape, self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Planar `f32` copy, the layout the network consumes.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn from_f32(shape: Shape, data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f64).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

impl TryFrom<u8> for BitDepth {
    type Error = Error;

    fn try_from(bits: u8) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            other => Err(Error::Parameter(format!("bit depth must be 8 or 16, got {other}"))),
        }
    }
}

fn interleaved_to_planar<T: Copy + Into<f64>>(
    raw: &[T],
    height: usize,
    width: usize,
    channels: usize,
    max: f64,
) -> Result<Image> {
    let shape = Shape::new(height, width, channels);
    let plane = shape.plane();
    let mut data = vec![0.0; shape.len()];
    for (i, px) in raw.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * plane + i] = v.into() / max;
        }
    }
    Image::new(shape, data)
}

/// Reads an 8- or 16-bit grayscale or RGB PNG/TIFF, rescaled to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Tiff) => {}
        other => {
            return Err(Error::Format {
                path: path.to_owned(),
                reason: format!("expected PNG or TIFF, detected {other:?}"),
            })
        }
    }
    let decoded = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_owned(),
            reason: other.to_string(),
        },
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma8(b) => interleaved_to_planar(b.as_raw(), h, w, 1, 255.0),
        DynamicImage::ImageRgb8(b) => interleaved_to_planar(b.as_raw(), h, w, 3, 255.0),
        DynamicImage::ImageLuma16(b) => interleaved_to_planar(b.as_raw(), h, w, 1, 65535.0),
        DynamicImage::ImageRgb16(b) => interleaved_to_planar(b.as_raw(), h, w, 3, 65535.0),
        other => Err(Error::Format {
            path: path.to_owned(),
            reason: format!("unsupported pixel layout {:?}", other.color()),
        }),
    }
}

fn quantize(image: &Image, max: f64) -> Vec<u16> {
    let s = image.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.len());
    for i in 0..plane {
        for c in 0..s.channels {
            let v = image.data[c * plane + i].clamp(0.0, 1.0);
            out.push((v * max).round() as u16);
        }
    }
    out
}

/// Clamps to `[0, 1]`, quantizes with `round(v * max)`, and writes a PNG.
pub fn save_image(image: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (image.width() as u32, image.height() as u32);
    let q = quantize(image, depth.max_value());
    let result = match (depth, image.channels()) {
        (BitDepth::Eight, 1) => {
            let raw: Vec<u8> = q.into_iter().map(|v| v as u8).collect();
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, raw)
                .expect("buffer length matches shape")
                .save_with_format(path, ImageFormat::Png)
        }
        (BitDepth::Eight, _) => {
            let raw: Vec<u8> = q.into_iter().map(|v| v as u8).collect();
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw)
                .expect("buffer length matches shape")
                .save_with_format(path, ImageFormat::Png)
        }
        (BitDepth::Sixteen, 1) => ImageBuffer::<Luma<u16>, _>::from_raw(w, h, q)
            .expect("buffer length matches shape")
            .save_with_format(path, ImageFormat::Png),
        (BitDepth::Sixteen, _) => ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, q)
            .expect("buffer length matches shape")
            .save_with_format(path, ImageFormat::Png),
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    })
}
