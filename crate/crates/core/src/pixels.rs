//! Interleaved RGB float image used by every transform in the crate.

use std::path::Path;

use image::RgbImage;

use crate::compression::codec;
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Row-major, channel-interleaved (`HWC`) float image.
///
/// Intensities are nominally in `[0, 1]`; after normalization they are
/// unbounded but must stay finite.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelTensor {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl PixelTensor {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::arg(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * CHANNELS {
            return Err(Error::arg(format!(
                "buffer of {} values does not match {width}x{height}x{CHANNELS}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("non-finite pixel value"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * CHANNELS).collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    /// Per-channel arithmetic mean.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0f64; 3];
        for px in self.data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                sums[c] += f64::from(px[c]);
            }
        }
        let n = (self.width * self.height) as f64;
        sums.map(|s| s / n)
    }

    pub fn max_abs_diff(&self, other: &PixelTensor) -> f32 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    /// Quantizes to 8-bit, clamping to the displayable range.
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }
}

/// Decodes an image file: standard formats through `image`, reference-codec
/// streams by their magic bytes.
pub fn load_rgb8(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgb8(&bytes).map_err(|reason| Error::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn decode_rgb8(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    if codec::is_reference_stream(bytes) {
        return codec::decode(bytes)
            .map(|t| t.to_rgb8())
            .map_err(|e| e.to_string());
    }
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| e.to_string())
}

pub fn load_image(path: &Path) -> Result<PixelTensor> {
    load_rgb8(path).map(|img| PixelTensor::from_rgb8(&img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_buffer() {
        assert!(PixelTensor::new(2, 2, vec![0.0; 11]).is_err());
        assert!(PixelTensor::new(0, 2, vec![]).is_err());
        assert!(PixelTensor::new(1, 1, vec![0.0, f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn rgb8_conversion_is_exact_on_grid_values() {
        let img = RgbImage::from_fn(3, 2, |x, y| image::Rgb([x as u8 * 40, y as u8 * 90, 255]));
        let t = PixelTensor::from_rgb8(&img);
        assert_eq!(t.to_rgb8(), img);
        assert_eq!(t.pixel(2, 1), [80.0 / 255.0, 90.0 / 255.0, 1.0]);
    }
}
