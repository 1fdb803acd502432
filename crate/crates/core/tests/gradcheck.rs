//! LoRA gradients against central finite differences, in f64 on the
//! miniature model.

use ndarray::{Array2, Array3};
use rand::Rng;
use styler_core::backbone::{tokenize, ModelConfig, UNetModel};
use styler_core::lora::{lora_loss_and_grads, LoraAdapter, LoraEntry, LoraSample};
use styler_core::rng::{gaussian_vec, stream};
use styler_core::{LatentTensor, NoiseSchedule};

const STEP: f64 = 1e-3;
const TOLERANCE: f64 = 1e-4;
const SAMPLED: usize = 60;

fn random_latent(shape: (usize, usize, usize), seed: u64) -> LatentTensor {
    let mut rng = stream(seed, "gradcheck/latent");
    let v = gaussian_vec(&mut rng, shape.0 * shape.1 * shape.2, 1.0);
    LatentTensor::from_array(Array3::from_shape_vec(shape, v).unwrap()).unwrap()
}

fn param(entries: &mut [LoraEntry<f64>], which: (usize, bool, usize, usize)) -> &mut f64 {
    let (e, is_a, r, c) = which;
    if is_a {
        &mut entries[e].a[[r, c]]
    } else {
        &mut entries[e].b[[r, c]]
    }
}

#[test]
fn lora_gradients_match_central_differences() {
    let cfg = ModelConfig::miniature();
    let base32 = UNetModel::<f32>::init(cfg.clone(), 3).unwrap();
    let tokens = tokenize("<stripe> style").unwrap();
    let mut adapter = LoraAdapter::init(&base32, 2, 1.0, tokens[0], 5).unwrap();
    // A fresh adapter has B = 0, which zeroes every dA; perturb B so both
    // factors carry gradient.
    let mut rng = stream(9, "gradcheck/b");
    for e in adapter.entries_mut() {
        let (r, c) = e.b.dim();
        e.b = Array2::from_shape_vec((r, c), gaussian_vec(&mut rng, r * c, 0.3)).unwrap();
    }
    let model = base32.cast::<f64>();
    let mut entries = adapter.cast_entries::<f64>();
    let mult = adapter.multiplier();
    let shape = (cfg.latent.height, cfg.latent.width, cfg.latent.channels);
    let z0 = random_latent(shape, 1);
    let sample = LoraSample { t: 400, eps: random_latent(shape, 2) };
    let schedule = NoiseSchedule::default();

    let (_, grads) = lora_loss_and_grads(&model, &entries, mult, &z0, &tokens, &sample, &schedule).unwrap();

    let mut pick = stream(4, "gradcheck/pick");
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < SAMPLED {
        let e = pick.random_range(0..entries.len());
        let is_a = pick.random_bool(0.5);
        let (rows, cols) = if is_a { entries[e].a.dim() } else { entries[e].b.dim() };
        let (r, c) = (pick.random_range(0..rows), pick.random_range(0..cols));
        let analytic = if is_a { grads[e].0[[r, c]] } else { grads[e].1[[r, c]] };
        let which = (e, is_a, r, c);
        let orig = *param(&mut entries, which);
        let mut loss_at = |v: f64| {
            *param(&mut entries, which) = v;
            lora_loss_and_grads(&model, &entries, mult, &z0, &tokens, &sample, &schedule).unwrap().0
        };
        let numeric = (loss_at(orig + STEP) - loss_at(orig - STEP)) / (2.0 * STEP);
        *param(&mut entries, which) = orig;
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-9 {
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        assert!(rel <= TOLERANCE, "entry {e} {} [{r},{c}]: analytic {analytic:e} numeric {numeric:e} rel {rel:e}", if is_a { "A" } else { "B" });
        worst = worst.max(rel);
        checked += 1;
    }
    println!("checked {checked} parameters, worst relative error {worst:.2e}");
}
