//! Image containers and lossless PNG / PPM interchange.
//!
//! Two containers are used throughout the crate. [`Tensor`] is an unbounded
//! planar (channel, row, column) array of `f64` that carries perturbations,
//! activations and gradients. [`ImageTensor`] wraps a `Tensor` whose every
//! element lies in `[0, 1]`; covers, stegos and secrets are `ImageTensor`s.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma, Rgb};

use crate::error::{Error, Result};

/// Planar `channels × height × width` array, row-major within each plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimensions(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels, self.height, self.width)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

impl Tensor {
    /// Clamp every element into `[0, 1]`.
    pub fn clamp_unit(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Quantize one unit-interval intensity to an integer level at `bitdepth`.
/// Rounds half away from zero.
#[inline]
pub fn quantize_level(v: f64, bitdepth: u8) -> u32 {
    let max = ((1u32 << bitdepth) - 1) as f64;
    (v.clamp(0.0, 1.0) * max).round() as u32
}

/// Snap a real intensity onto the 8-bit grid, staying in real units.
#[inline]
pub fn quantize8_value(v: f64) -> f64 {
    quantize_level(v, 8) as f64 / 255.0
}

/// Tensor whose elements are all unit-interval intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    /// Validates that channels are 1 or 3, dimensions are non-zero and every
    /// element lies in `[0, 1]`.
    pub fn new(t: Tensor) -> Result<Self> {
        if t.channels != 1 && t.channels != 3 {
            return Err(Error::Dimensions(format!(
                "images have 1 or 3 channels, got {}",
                t.channels
            )));
        }
        if t.height == 0 || t.width == 0 {
            return Err(Error::Dimensions("zero-sized image".into()));
        }
        if let Some(bad) = t.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange {
                name: "intensity".into(),
                message: format!("{bad} is outside [0, 1]"),
            });
        }
        Ok(Self(t))
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(channels, height, width, data)?)
    }

    /// Clamps into `[0, 1]` instead of rejecting. NaN becomes 0.
    pub fn from_clamped(t: &Tensor) -> Self {
        Self(t.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self(Tensor::filled(channels, height, width, value.clamp(0.0, 1.0)))
    }

    #[inline]
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.0.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.0.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.0.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.get(c, y, x)
    }

    /// Round every element onto the 8-bit grid.
    pub fn quantize8(&self) -> Self {
        Self(self.0.map(quantize8_value))
    }

    /// Per-pixel channel mean.
    pub fn luminance(&self) -> Vec<f64> {
        let n = self.0.plane_len();
        let c = self.channels();
        (0..n)
            .map(|i| (0..c).map(|ch| self.0.data[ch * n + i]).sum::<f64>() / c as f64)
            .collect()
    }

    /// Integer levels at `bitdepth` in interleaved (row, column, channel) order.
    pub fn to_levels(&self, bitdepth: u8) -> Vec<u32> {
        let (c, h, w) = self.shape();
        let mut out = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.push(quantize_level(self.get(ch, y, x), bitdepth));
                }
            }
        }
        out
    }

    fn from_levels<T: Copy + Into<u32>>(
        channels: usize,
        height: usize,
        width: usize,
        levels: &[T],
        bitdepth: u8,
    ) -> Result<Self> {
        let max = ((1u32 << bitdepth) - 1) as f64;
        let mut t = Tensor::zeros(channels, height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v: u32 = levels[(y * width + x) * channels + c].into();
                    t.set(c, y, x, v as f64 / max);
                }
            }
        }
        Self::new(t)
    }
}

/// Read an 8- or 16-bit PNG, or a binary PPM/PGM. Alpha channels are dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        Some(other) => return Err(Error::UnsupportedFormat(format!("{other:?}"))),
        None => return Err(Error::UnsupportedFormat(path.display().to_string())),
    }
    let decoded = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Dimensions(format!("{} is empty", path.display())));
    }
    match decoded {
        DynamicImage::ImageLuma8(buf) => ImageTensor::from_levels(1, h, w, buf.as_raw(), 8),
        DynamicImage::ImageRgb8(buf) => ImageTensor::from_levels(3, h, w, buf.as_raw(), 8),
        DynamicImage::ImageLuma16(buf) => ImageTensor::from_levels(1, h, w, buf.as_raw(), 16),
        DynamicImage::ImageRgb16(buf) => ImageTensor::from_levels(3, h, w, buf.as_raw(), 16),
        DynamicImage::ImageLumaA8(_) => {
            ImageTensor::from_levels(1, h, w, decoded.to_luma8().as_raw(), 8)
        }
        DynamicImage::ImageRgba8(_) => {
            ImageTensor::from_levels(3, h, w, decoded.to_rgb8().as_raw(), 8)
        }
        DynamicImage::ImageLumaA16(_) => {
            ImageTensor::from_levels(1, h, w, decoded.to_luma16().as_raw(), 16)
        }
        DynamicImage::ImageRgba16(_) => {
            ImageTensor::from_levels(3, h, w, decoded.to_rgb16().as_raw(), 16)
        }
        other => Err(Error::UnsupportedFormat(format!("{:?}", other.color()))),
    }
}

/// Write a lossless PNG at 8 or 16 bits per channel.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>, bitdepth: u8) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = img.shape();
    let (w32, h32) = (w as u32, h as u32);
    let levels = img.to_levels(bitdepth);
    let encode_err = |e: image::ImageError| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    match (bitdepth, c) {
        (8, 1) => {
            let raw: Vec<u8> = levels.iter().map(|&v| v as u8).collect();
            ImageBuffer::<Luma<u8>, _>::from_raw(w32, h32, raw)
                .expect("buffer size")
                .save_with_format(path, ImageFormat::Png)
                .map_err(encode_err)
        }
        (8, 3) => {
            let raw: Vec<u8> = levels.iter().map(|&v| v as u8).collect();
            ImageBuffer::<Rgb<u8>, _>::from_raw(w32, h32, raw)
                .expect("buffer size")
                .save_with_format(path, ImageFormat::Png)
                .map_err(encode_err)
        }
        (16, 1) => {
            let raw: Vec<u16> = levels.iter().map(|&v| v as u16).collect();
            ImageBuffer::<Luma<u16>, _>::from_raw(w32, h32, raw)
                .expect("buffer size")
                .save_with_format(path, ImageFormat::Png)
                .map_err(encode_err)
        }
        (16, 3) => {
            let raw: Vec<u16> = levels.iter().map(|&v| v as u16).collect();
            ImageBuffer::<Rgb<u16>, _>::from_raw(w32, h32, raw)
                .expect("buffer size")
                .save_with_format(path, ImageFormat::Png)
                .map_err(encode_err)
        }
        (bd, _) if bd != 8 && bd != 16 => Err(Error::InvalidParameter(format!(
            "bit depth must be 8 or 16, got {bd}"
        ))),
        _ => unreachable!("ImageTensor has 1 or 3 channels"),
    }
}

/// Content hash of an image file's bytes, hex encoded.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash of the 8-bit levels of an image, independent of PNG encoder details.
pub fn pixel_sha256(img: &ImageTensor) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    let (c, h, w) = img.shape();
    hasher.update((c as u32).to_le_bytes());
    hasher.update((h as u32).to_le_bytes());
    hasher.update((w as u32).to_le_bytes());
    let bytes: Vec<u8> = img.to_levels(8).into_iter().map(|v| v as u8).collect();
    hasher.update(&bytes);
    hex::encode(hasher.finalize())
}
