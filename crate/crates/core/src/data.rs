//! Procedural 32x32 shape images and the deterministic style transforms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ToyImage, IMAGE_SIZE};
use crate::rng::{self, StageRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleKind {
    /// Darkens every odd pixel column.
    Stripe,
    /// `x -> 1 - x` per channel.
    Invert,
    /// Pushes each channel away from the pixel's gray level.
    Saturate,
}

impl StyleKind {
    pub fn trigger(self) -> &'static str {
        match self {
            StyleKind::Stripe => "<stripe>",
            StyleKind::Invert => "<invert>",
            StyleKind::Saturate => "<saturate>",
        }
    }

    pub fn apply(self, img: &ToyImage) -> ToyImage {
        match self {
            StyleKind::Stripe => {
                ToyImage::from_fn(|y, x, c| {
                    let v = img.get(y, x, c);
                    if x % 2 == 1 {
                        v * 0.3
                    } else {
                        v
                    }
                })
            }
            StyleKind::Invert => ToyImage::from_fn(|y, x, c| 1.0 - img.get(y, x, c)),
            StyleKind::Saturate => ToyImage::from_fn(|y, x, c| {
                let gray = (0..3).map(|k| img.get(y, x, k)).sum::<f32>() / 3.0;
                gray + 2.5 * (img.get(y, x, c) - gray)
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub shapes: Vec<ShapeKind>,
    /// Per-channel range of the flat background colour.
    pub background_range: [f32; 2],
    /// Per-channel range of the shape colour.
    pub foreground_range: [f32; 2],
    /// Shape half-extent as a fraction of the image half-width.
    pub scale_range: [f32; 2],
    #[serde(default)]
    pub style: Option<StyleKind>,
    pub count: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            shapes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle],
            background_range: [0.0, 1.0],
            foreground_range: [0.0, 1.0],
            scale_range: [0.35, 0.75],
            style: None,
            count: 512,
            seed: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |r: [f32; 2]| 0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0;
        if self.shapes.is_empty() {
            return Err(Error::InvalidRange("dataset needs at least one shape".into()));
        }
        if !unit(self.background_range) || !unit(self.foreground_range) {
            return Err(Error::InvalidRange("colour ranges must lie in [0, 1]".into()));
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1] && self.scale_range[1] <= 1.0) {
            return Err(Error::InvalidRange("scale range must lie in (0, 1]".into()));
        }
        if self.count == 0 {
            return Err(Error::InvalidRange("dataset count must be positive".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Vec<Sample>> {
        self.validate()?;
        let mut rng = rng::stream(self.seed, "dataset/samples");
        Ok((0..self.count).map(|_| self.draw(&mut rng)).collect())
    }

    /// An image outside the training set, e.g. a style reference or a content
    /// image for transfer.
    pub fn held_out(&self, index: usize) -> Result<Sample> {
        self.validate()?;
        let mut rng = rng::stream(self.seed, &format!("dataset/held_out/{index}"));
        Ok(self.draw(&mut rng))
    }

    fn draw(&self, rng: &mut StageRng) -> Sample {
        let shape = self.shapes[rng.random_range(0..self.shapes.len())];
        let pick = |rng: &mut StageRng, r: [f32; 2]| -> [f32; 3] {
            std::array::from_fn(|_| {
                if r[0] == r[1] {
                    r[0]
                } else {
                    rng.random_range(r[0]..r[1])
                }
            })
        };
        let background = pick(rng, self.background_range);
        // Keep a visible contrast between shape and background.
        let mut foreground = pick(rng, self.foreground_range);
        for _ in 0..16 {
            let contrast: f32 = (0..3).map(|c| (foreground[c] - background[c]).abs()).sum::<f32>() / 3.0;
            if contrast >= 0.3 {
                break;
            }
            foreground = pick(rng, self.foreground_range);
        }
        let half = IMAGE_SIZE as f32 / 2.0;
        let extent = if self.scale_range[0] == self.scale_range[1] {
            self.scale_range[0]
        } else {
            rng.random_range(self.scale_range[0]..self.scale_range[1])
        } * half;
        let lo = extent;
        let hi = IMAGE_SIZE as f32 - extent;
        let mut center = || if hi > lo { rng.random_range(lo..hi) } else { half };
        let (cy, cx) = (center(), center());
        let mut image = render(shape, cy, cx, extent, foreground, background);
        if let Some(style) = self.style {
            image = style.apply(&image);
        }
        Sample { image, shape }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ToyImage,
    pub shape: ShapeKind,
}

pub fn render(shape: ShapeKind, cy: f32, cx: f32, extent: f32, fg: [f32; 3], bg: [f32; 3]) -> ToyImage {
    let inside = |y: usize, x: usize| {
        let (py, px) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
        match shape {
            ShapeKind::Circle => py * py + px * px <= extent * extent,
            ShapeKind::Square => py.abs() <= 0.85 * extent && px.abs() <= 0.85 * extent,
            ShapeKind::Triangle => {
                // apex at the top, base at +0.8 extent
                let top = -extent;
                let base = 0.8 * extent;
                py >= top && py <= base && px.abs() <= (py - top) / (base - top) * extent
            }
        }
    };
    ToyImage::from_fn(|y, x, c| if inside(y, x) { fg[c] } else { bg[c] })
}

/// A vertical split mask at image resolution: 1 on the left `cols` columns.
pub fn left_mask(cols: usize) -> Vec<u8> {
    (0..IMAGE_SIZE * IMAGE_SIZE)
        .map(|i| u8::from(i % IMAGE_SIZE < cols))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = DatasetConfig {
            count: 4,
            ..Default::default()
        };
        assert_eq!(cfg.generate().unwrap(), cfg.generate().unwrap());
        let other = DatasetConfig { seed: 2, ..cfg.clone() };
        assert_ne!(cfg.generate().unwrap(), other.generate().unwrap());
        assert_ne!(cfg.held_out(0).unwrap(), cfg.held_out(1).unwrap());
    }

    #[test]
    fn styles_are_deterministic_pixel_maps() {
        let img = render(ShapeKind::Circle, 16.0, 16.0, 8.0, [1.0, 0.2, 0.2], [0.2, 0.2, 1.0]);
        let inv = StyleKind::Invert.apply(&img);
        assert_eq!(StyleKind::Invert.apply(&inv), img);
        let striped = StyleKind::Stripe.apply(&img);
        assert_eq!(striped.get(0, 0, 2), img.get(0, 0, 2));
        assert!(striped.get(0, 1, 2) < img.get(0, 1, 2));
        let sat = StyleKind::Saturate.apply(&img);
        assert_eq!(sat.get(16, 16, 1), 0.0);
    }

    #[test]
    fn shapes_cover_their_center() {
        for shape in [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle] {
            let img = render(shape, 16.0, 16.0, 8.0, [1.0; 3], [0.0; 3]);
            assert_eq!(img.get(16, 16, 0), 1.0, "{shape:?}");
            assert_eq!(img.get(0, 0, 0), 0.0, "{shape:?}");
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = DatasetConfig {
            count: 0,
            ..Default::default()
        };
        assert!(cfg.generate().is_err());
        let cfg = DatasetConfig {
            background_range: [0.5, 1.5],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
