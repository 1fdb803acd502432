//! Shared inputs for the styler benchmarks.

use ndarray::Array3;
use styler_core::backbone::LATENT_SHAPE;
use styler_core::rng::{gaussian_vec, stream};
use styler_core::LatentTensor;

/// A standard-normal latent at the toy model's shape.
pub fn random_latent(seed: u64) -> LatentTensor {
    let s = LATENT_SHAPE;
    let v = gaussian_vec(&mut stream(seed, "bench/latent"), s.height * s.width * s.channels, 1.0);
    LatentTensor::from_array(Array3::from_shape_vec((s.height, s.width, s.channels), v).expect("shape"))
        .expect("finite")
}
