use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use styler_bench::random_latent;
use styler_core::backbone::{tokenize, ModelConfig, NoHooks, UNetModel};
use styler_core::composition::{mask_blend, RegionMask};
use styler_core::injection::{blend_attention, InjectionConfig};
use styler_core::lora::{AdaptedModel, LoraAdapter};
use styler_core::schedule::ddim_denoise_step;
use styler_core::NoiseSchedule;

fn forward(c: &mut Criterion) {
    let base = UNetModel::init(ModelConfig::toy(), 1).unwrap();
    let tokens = tokenize("<stripe> style").unwrap();
    let prompt = base.embed_prompt(&tokens).unwrap();
    let adapter = LoraAdapter::init(&base, 16, 1.0, tokens[0], 2).unwrap();
    let adapted = AdaptedModel::new(&base, &adapter).unwrap();
    let z = random_latent(3);
    c.bench_function("unet_forward", |b| {
        b.iter(|| base.forward(black_box(&z), 500, &prompt, &mut NoHooks).unwrap())
    });
    c.bench_function("unet_forward_lora", |b| {
        b.iter(|| adapted.forward(black_box(&z), 500, &prompt, &mut NoHooks).unwrap())
    });
}

fn kernels(c: &mut Criterion) {
    let schedule = NoiseSchedule::default();
    let z = random_latent(4);
    let eps = random_latent(5);
    c.bench_function("ddim_denoise_step", |b| {
        b.iter(|| ddim_denoise_step(black_box(&z), &eps, 500, Some(480), &schedule).unwrap())
    });

    let n = 256;
    let a_src = Array2::from_elem((n, n), 1.0 / n as f32);
    let a_lora = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 });
    let cfg = InjectionConfig::default();
    c.bench_function("blend_attention_256", |b| {
        b.iter(|| blend_attention(black_box(&a_src), &a_lora, 40, 50, &cfg).unwrap())
    });

    let mask = RegionMask::left(12);
    c.bench_function("mask_blend", |b| b.iter(|| mask_blend(black_box(&z), &eps, &mask).unwrap()));
}

criterion_group!(benches, forward, kernels);
criterion_main!(benches);
