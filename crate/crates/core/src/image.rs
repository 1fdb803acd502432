//! 32x32 RGB images and 8-bit PNG I/O.
//!
//! Pixels always sit on the 8-bit grid `k / 255`; that is what makes the
//! latent codec exactly invertible in `f32`.

use std::path::Path;

use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyImage {
    pixels: Array3<f32>,
}

pub fn quantize(v: f32) -> f32 {
    level(v) as f32 / 255.0
}

pub fn level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl ToyImage {
    pub fn filled(rgb: [f32; 3]) -> Self {
        Self::from_fn(|_, _, c| rgb[c])
    }

    /// Builds an image from arbitrary reals; values are clamped and snapped to
    /// the 8-bit grid.
    pub fn from_fn(mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let pixels = Array3::from_shape_fn((IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS), |(y, x, c)| {
            quantize(f(y, x, c))
        });
        Self { pixels }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let expected = IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS;
        if bytes.len() != expected {
            return Err(Error::InvalidImage(format!(
                "expected {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let pixels = Array3::from_shape_vec(
            (IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS),
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
        .expect("length checked");
        Ok(Self { pixels })
    }

    /// Accepts only values already on the 8-bit grid.
    pub fn from_array(pixels: Array3<f32>) -> Result<Self> {
        if pixels.dim() != (IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS) {
            return Err(Error::shape((IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS), pixels.dim()));
        }
        if let Some(v) = pixels.iter().find(|&&v| !(0.0..=1.0).contains(&v) || quantize(v) != v) {
            return Err(Error::InvalidImage(format!("pixel {v} is not an 8-bit level")));
        }
        Ok(Self {
            pixels: pixels.as_standard_layout().into_owned(),
        })
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[[y, x, c]]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| level(v)).collect()
    }

    pub fn sha256(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    pub fn max_abs_diff(&self, other: &ToyImage) -> f32 {
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mean_abs_diff(&self, other: &ToyImage) -> f64 {
        self.pixels
            .iter()
            .zip(other.pixels.iter())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.pixels.len() as f64
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        if img.dimensions() != (IMAGE_SIZE as u32, IMAGE_SIZE as u32) {
            return Err(Error::InvalidImage(format!(
                "{} is {:?}, expected {IMAGE_SIZE}x{IMAGE_SIZE}",
                path.display(),
                img.dimensions()
            )));
        }
        Self::from_bytes(img.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_bytes(),
            IMAGE_SIZE as u32,
            IMAGE_SIZE as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex_digest(&std::fs::read(path)?))
}

/// Writes an 8-bit grayscale PNG of arbitrary size.
pub fn save_gray_png(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| level(v)).collect();
    image::save_buffer(
        path,
        &bytes,
        width as u32,
        height as u32,
        image::ExtendedColorType::L8,
    )?;
    Ok(())
}

/// Writes an 8-bit RGB PNG of arbitrary size from interleaved `[0,1]` values.
pub fn save_rgb_png(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&v| level(v)).collect();
    image::save_buffer(
        path,
        &bytes,
        width as u32,
        height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

/// Loads an 8-bit grayscale PNG (any colour type is converted to luma).
pub fn load_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}
