//! Exact identities of the injection and composition operators, on an
//! untrained toy model with a short plan.

use styler_core::backbone::{decode, encode, tokenize, ModelConfig, UNetModel, LATENT_SHAPE};
use styler_core::composition::{
    lora_switch_denoise, masked_multi_lora_denoise, BlendTarget, RegionMask, SpatialPlan, SpatialRegion,
    TemporalPlan, TemporalSegment,
};
use styler_core::data::DatasetConfig;
use styler_core::injection::{
    capture_trace, guided_denoise_with, AttentionMode, InjectionConfig, InjectionTrace,
};
use styler_core::lora::LoraAdapter;
use styler_core::rng::{gaussian_vec, stream};
use styler_core::{Error, NoiseSchedule, SamplingPlan, ToyImage};

const STEPS: usize = 10;

struct Setup {
    base: UNetModel,
    schedule: NoiseSchedule,
    plan: SamplingPlan,
    cfg: InjectionConfig,
}

fn setup() -> Setup {
    let schedule = NoiseSchedule::default();
    Setup {
        base: UNetModel::init(ModelConfig::toy(), 21).unwrap(),
        plan: SamplingPlan::new(&schedule, STEPS, 0).unwrap(),
        schedule,
        cfg: InjectionConfig {
            feature_steps: 6,
            attention_full_steps: 5,
            ..InjectionConfig::default()
        },
    }
}

fn content(i: usize) -> ToyImage {
    DatasetConfig::default().held_out(i).unwrap().image
}

fn zero_adapter(base: &UNetModel) -> LoraAdapter {
    LoraAdapter::init(base, 4, 1.0, tokenize("<s1>").unwrap()[0], 3).unwrap()
}

/// An adapter with non-zero B factors, so it actually changes the model.
fn styled_adapter(base: &UNetModel, seed: u64) -> LoraAdapter {
    let mut a = LoraAdapter::init(base, 4, 1.0, tokenize("<s2>").unwrap()[0], seed).unwrap();
    let mut rng = stream(seed, "test/b");
    for e in a.entries_mut() {
        let n = e.b.len();
        let v = gaussian_vec(&mut rng, n, 0.05);
        e.b.iter_mut().zip(v).for_each(|(b, x)| *b = x);
    }
    a
}

fn trace(s: &Setup, i: usize) -> InjectionTrace {
    capture_trace(&s.base, &content(i), &s.plan, &s.schedule, &s.cfg).unwrap()
}

#[test]
fn self_injection_reproduces_the_replay() {
    let s = setup();
    let zero = zero_adapter(&s.base);
    let null = s.base.null_prompt();
    for i in 0..2 {
        let tr = trace(&s, i);
        let (z, stats) = guided_denoise_with(&s.base, Some(&zero), &tr, &null, &s.plan, &s.schedule, &s.cfg).unwrap();
        assert!(z.bit_eq(tr.final_latent()), "content {i}");
        assert!(stats.feature_overrides > 0 && stats.attention_overrides > 0);

        let attention_only = InjectionConfig {
            feature_steps: 0,
            attention_mode: AttentionMode::Full,
            attention_full_steps: STEPS,
            ..s.cfg.clone()
        };
        let tr = capture_trace(&s.base, &content(i), &s.plan, &s.schedule, &attention_only).unwrap();
        let (z, _) =
            guided_denoise_with(&s.base, Some(&zero), &tr, &null, &s.plan, &s.schedule, &attention_only).unwrap();
        assert!(z.bit_eq(tr.final_latent()));
    }
}

#[test]
fn injected_runs_are_deterministic_and_mode_dependent() {
    let s = setup();
    let tr = trace(&s, 0);
    let styled = styled_adapter(&s.base, 8);
    let p = s.base.embed_prompt(&tokenize("<s2> style").unwrap()).unwrap();
    let run = |mode| {
        let cfg = InjectionConfig { attention_mode: mode, ..s.cfg.clone() };
        guided_denoise_with(&s.base, Some(&styled), &tr, &p, &s.plan, &s.schedule, &cfg).unwrap()
    };
    let (a1, stats) = run(AttentionMode::Adaptive);
    let (a2, _) = run(AttentionMode::Adaptive);
    assert!(a1.bit_eq(&a2));
    assert!(stats.max_row_sum_error <= 1e-5, "{}", stats.max_row_sum_error);
    let n_a = s.cfg.attention_full_steps;
    assert!(stats.source_weights.range(..n_a).all(|(_, &w)| w == 1.0));
    let weights: Vec<f64> = stats.source_weights.range(n_a..).map(|(_, &w)| w).collect();
    assert_eq!(weights.len(), STEPS - n_a);
    assert_eq!(weights[0], 1.0);
    assert!(weights.windows(2).all(|w| w[0] > w[1]), "{weights:?}");
    let (full, _) = run(AttentionMode::Full);
    let (partial, _) = run(AttentionMode::Partial);
    assert!(!a1.bit_eq(&full) && !a1.bit_eq(&partial) && !full.bit_eq(&partial));
}

#[test]
fn trace_survives_a_save_load_cycle() {
    let s = setup();
    let tr = trace(&s, 1);
    let dir = tempfile::tempdir().unwrap();
    tr.save(dir.path()).unwrap();
    let back = InjectionTrace::load(dir.path(), LATENT_SHAPE).unwrap();
    let styled = styled_adapter(&s.base, 2);
    let null = s.base.null_prompt();
    let run = |t: &InjectionTrace| guided_denoise_with(&s.base, Some(&styled), t, &null, &s.plan, &s.schedule, &s.cfg).unwrap().0;
    assert!(run(&tr).bit_eq(&run(&back)));
}

#[test]
fn degenerate_masks_reduce_to_single_branches() {
    let s = setup();
    let tr = trace(&s, 2);
    let styled = styled_adapter(&s.base, 4);
    let p = s.base.embed_prompt(&tokenize("<s2> style").unwrap()).unwrap();
    let null = s.base.null_prompt();

    let empty = SpatialPlan { regions: vec![], background_prompt: null.clone(), blend: BlendTarget::Latent };
    let run = masked_multi_lora_denoise(&s.base, &empty, &tr, &s.plan, &s.schedule, &s.cfg).unwrap();
    assert!(run.latent.bit_eq(tr.final_latent()));

    let (single, _) = guided_denoise_with(&s.base, Some(&styled), &tr, &p, &s.plan, &s.schedule, &s.cfg).unwrap();
    for blend in [BlendTarget::Latent, BlendTarget::Eps] {
        let full = SpatialPlan {
            regions: vec![SpatialRegion { name: "all".into(), mask: RegionMask::full(), adapter: &styled, prompt: p.clone() }],
            background_prompt: null.clone(),
            blend,
        };
        let run = masked_multi_lora_denoise(&s.base, &full, &tr, &s.plan, &s.schedule, &s.cfg).unwrap();
        assert!(run.latent.bit_eq(&single), "{blend:?}");
    }
}

#[test]
fn background_cells_follow_the_base_branch() {
    let s = setup();
    let tr = trace(&s, 3);
    let a = styled_adapter(&s.base, 5);
    let b = styled_adapter(&s.base, 6);
    let p = s.base.embed_prompt(&tokenize("<s2> style").unwrap()).unwrap();
    let plan = SpatialPlan {
        regions: vec![
            SpatialRegion { name: "left".into(), mask: RegionMask::left(12), adapter: &a, prompt: p.clone() },
            SpatialRegion { name: "right".into(), mask: RegionMask::right(12), adapter: &b, prompt: p.clone() },
        ],
        background_prompt: s.base.null_prompt(),
        blend: BlendTarget::Latent,
    };
    let owners = plan.owners();
    let run = masked_multi_lora_denoise(&s.base, &plan, &tr, &s.plan, &s.schedule, &s.cfg).unwrap();
    assert_eq!(run.steps.len(), STEPS);
    let width = LATENT_SHAPE.width;
    for step in &run.steps {
        let base_z = step.base.as_ref().unwrap();
        for ((y, x, c), v) in step.combined.data().indexed_iter() {
            if owners[y * width + x].is_none() {
                assert_eq!(v.to_bits(), base_z.data()[[y, x, c]].to_bits());
            }
        }
    }
}

#[test]
fn overlapping_masks_are_rejected_by_name() {
    let s = setup();
    let a = zero_adapter(&s.base);
    let p = s.base.null_prompt();
    let plan = SpatialPlan {
        regions: vec![
            SpatialRegion { name: "one.png".into(), mask: RegionMask::left(20), adapter: &a, prompt: p.clone() },
            SpatialRegion { name: "two.png".into(), mask: RegionMask::right(20), adapter: &a, prompt: p.clone() },
        ],
        background_prompt: p.clone(),
        blend: BlendTarget::Latent,
    };
    match plan.validate() {
        Err(Error::OverlappingMasks { first, second, cells }) => {
            assert_eq!((first.as_str(), second.as_str()), ("one.png", "two.png"));
            assert_eq!(cells, 4 * LATENT_SHAPE.height);
        }
        other => panic!("expected overlap error, got {other:?}"),
    }
}

#[test]
fn lora_switch_single_range_and_order() {
    let s = setup();
    let tr = trace(&s, 4);
    let a = styled_adapter(&s.base, 11);
    let b = styled_adapter(&s.base, 12);
    let p = s.base.embed_prompt(&tokenize("<s2> style").unwrap()).unwrap();
    let seg = |name: &str, ad, start, end| TemporalSegment { name: name.into(), adapter: ad, prompt: p.clone(), start, end };

    let single = TemporalPlan { segments: vec![seg("a", &a, 0, STEPS)] };
    let (z, _) = lora_switch_denoise(&s.base, &single, &tr, &s.plan, &s.schedule, &s.cfg).unwrap();
    let (direct, _) = guided_denoise_with(&s.base, Some(&a), &tr, &p, &s.plan, &s.schedule, &s.cfg).unwrap();
    assert!(z.bit_eq(&direct));

    let ab = TemporalPlan { segments: vec![seg("a", &a, 0, 5), seg("b", &b, 5, STEPS)] };
    let ba = TemporalPlan { segments: vec![seg("b", &b, 0, 5), seg("a", &a, 5, STEPS)] };
    let (zab, _) = lora_switch_denoise(&s.base, &ab, &tr, &s.plan, &s.schedule, &s.cfg).unwrap();
    let (zba, _) = lora_switch_denoise(&s.base, &ba, &tr, &s.plan, &s.schedule, &s.cfg).unwrap();
    assert!(!zab.bit_eq(&zba));

    let gap = TemporalPlan { segments: vec![seg("a", &a, 0, 4), seg("b", &b, 5, STEPS)] };
    let overlap = TemporalPlan { segments: vec![seg("a", &a, 0, 6), seg("b", &b, 5, STEPS)] };
    for (plan, word) in [(gap, "gap"), (overlap, "overlap")] {
        match lora_switch_denoise(&s.base, &plan, &tr, &s.plan, &s.schedule, &s.cfg) {
            Err(Error::InvalidPlan(m)) => assert!(m.contains(word), "{m}"),
            other => panic!("expected {word} error, got {:?}", other.map(|_| ())),
        }
    }
}

#[test]
fn codec_round_trip_is_exact() {
    let data = DatasetConfig { count: 16, seed: 3, ..DatasetConfig::default() };
    for sample in data.generate().unwrap() {
        assert_eq!(decode(&encode(&sample.image)).to_bytes(), sample.image.to_bytes());
    }
}
