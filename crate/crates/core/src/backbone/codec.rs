//! Analytic image <-> latent codec.
//!
//! `x -> 2x - 1`, then 2x2 space-to-depth: pixel `(2y + dy, 2x + dx, c)` lands
//! in latent cell `(y, x)` at channel `(dy * 2 + dx) * 3 + c`.

use crate::image::{quantize, ToyImage, IMAGE_CHANNELS, IMAGE_SIZE};
use crate::tensor::{LatentShape, LatentTensor};

pub const LATENT_SIZE: usize = IMAGE_SIZE / 2;
pub const LATENT_CHANNELS: usize = IMAGE_CHANNELS * 4;
pub const LATENT_SHAPE: LatentShape = LatentShape::new(LATENT_SIZE, LATENT_SIZE, LATENT_CHANNELS);

pub fn latent_channel(dy: usize, dx: usize, c: usize) -> usize {
    (dy * 2 + dx) * IMAGE_CHANNELS + c
}

pub fn encode(img: &ToyImage) -> LatentTensor {
    let mut values = vec![0.0f32; LATENT_SHAPE.len()];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            for c in 0..IMAGE_CHANNELS {
                let cell = (y / 2) * LATENT_SIZE + x / 2;
                let ch = latent_channel(y % 2, x % 2, c);
                values[cell * LATENT_CHANNELS + ch] = 2.0 * img.get(y, x, c) - 1.0;
            }
        }
    }
    LatentTensor::from_vec(LATENT_SHAPE, values).expect("image values are finite")
}

/// Inverse of [`encode`]. Pixels are clamped to `[0, 1]` and snapped to the
/// 8-bit grid, which undoes the `f32` rounding of the affine map exactly.
pub fn decode(z: &LatentTensor) -> ToyImage {
    let data = z.data();
    ToyImage::from_fn(|y, x, c| {
        let v = data[[y / 2, x / 2, latent_channel(y % 2, x % 2, c)]];
        quantize((v + 1.0) * 0.5)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn midpoint_image_is_zero_latent() {
        // 0.5 is off the 8-bit grid; the zero latent is the affine midpoint.
        let zero = LatentTensor::zeros(LATENT_SHAPE);
        let img = decode(&zero);
        assert!(img.pixels().iter().all(|&v| v == 128.0 / 255.0));
        let z = encode(&ToyImage::filled([128.0 / 255.0; 3]));
        assert!(z.as_slice().iter().all(|&v| (v - 1.0 / 255.0).abs() < 1e-6));
    }

    #[test]
    fn single_white_pixel_layout() {
        let img = ToyImage::from_fn(|y, x, _| if y == 0 && x == 0 { 1.0 } else { 0.0 });
        let z = encode(&img);
        let cell = z.data().slice(ndarray::s![0, 0, ..]).to_vec();
        let expected: Vec<f32> = (0..12).map(|ch| if ch < 3 { 1.0 } else { -1.0 }).collect();
        assert_eq!(cell, expected);
        // every other cell is all -1
        let ones = z.as_slice().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 3);
        assert!(z.as_slice().iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn white_pixel_decodes_back() {
        let mut values = vec![-1.0f32; LATENT_SHAPE.len()];
        values[..3].fill(1.0);
        let img = decode(&LatentTensor::from_vec(LATENT_SHAPE, values).unwrap());
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 1, 0), 0.0);
        assert_eq!(img.get(1, 0, 2), 0.0);
    }

    proptest! {
        #[test]
        fn codec_is_bijective(bytes in prop::collection::vec(any::<u8>(), 32 * 32 * 3)) {
            let img = ToyImage::from_bytes(&bytes).unwrap();
            let back = decode(&encode(&img));
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert!(back.pixels().iter().zip(img.pixels().iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
