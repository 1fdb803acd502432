//! Seed splitting.
//!
//! Every stage draws from its own ChaCha stream whose seed is the first eight
//! bytes (little-endian) of `SHA-256(root_seed_le || label)`. Labels are short
//! ASCII paths such as `"train_base/init"`, so adding a stage never perturbs
//! the numbers an existing stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(root: u64, label: &str) -> StageRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

pub fn gaussian_vec(rng: &mut StageRng, n: usize, std: f64) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            (x * std) as f32
        })
        .collect()
}
