//! Command execution. Every input is loaded and every plan validated before
//! any compute starts; outputs are written only once the run has succeeded.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use styler_core::analysis::{
    cosine_layers, extract_features, pca_project, save_component_grid, PcaProjection, StudyCase, StudyModel,
};
use styler_core::backbone::{
    decode, load_checkpoint, save_checkpoint, tokenize, train_base, PromptEmbedding, TokenId, UNetModel,
};
use styler_core::composition::{
    lora_switch_denoise, masked_multi_lora_denoise, BlendTarget, RegionMask, SpatialPlan, SpatialRegion,
    TemporalPlan, TemporalSegment,
};
use styler_core::injection::{capture_trace, guided_denoise_with, InjectionConfig, InjectionStats};
use styler_core::lora::{train_lora, LoraAdapter, DEFAULT_RANK};
use styler_core::{NoiseSchedule, SamplingPlan, ToyImage};

use crate::config::{
    AnalyzeRun, Command, MaskedRun, MultistyleRun, RunConfig, TrainBaseRun, TrainLoraRun, TransferRun, BASE_MODEL,
};
use crate::error::{CliError, CliResult, ErrorKind, InputContext};
use crate::fixture::{self, Preset};
use crate::manifest::{hash_outputs, path_sha256, RunManifest, SeedRecord, Timings, TOOL};

pub const OUTPUT_PNG: &str = "output.png";
pub const RECONSTRUCTION_PNG: &str = "reconstruction.png";
pub const REPORT_JSON: &str = "report.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ADAPTER_DIR: &str = "adapter";

enum Artifact {
    Png(String, ToyImage),
    Json(String, serde_json::Value),
    Checkpoint(String, Box<UNetModel>),
    Adapter(String, LoraAdapter),
    PcaGrid {
        name: String,
        rows: Vec<(usize, PcaProjection)>,
        resolutions: BTreeMap<usize, (usize, usize)>,
    },
}

impl Artifact {
    fn write(&self, dir: &Path) -> CliResult<()> {
        match self {
            Artifact::Png(name, img) => img.save_png(&dir.join(name))?,
            Artifact::Json(name, value) => {
                let mut text = serde_json::to_string_pretty(value)?;
                text.push('\n');
                fs::write(dir.join(name), text)?;
            }
            Artifact::Checkpoint(name, model) => save_checkpoint(model, &dir.join(name))?,
            Artifact::Adapter(name, adapter) => adapter.save(&dir.join(name))?,
            Artifact::PcaGrid { name, rows, resolutions } => {
                save_component_grid(&dir.join(name), rows, |l| resolutions[&l], 64)?
            }
        }
        Ok(())
    }
}

/// What a command produced, before anything touches the output directory.
#[derive(Default)]
struct RunOutput {
    artifacts: Vec<Artifact>,
    seeds: BTreeMap<String, SeedRecord>,
    inputs: BTreeMap<String, String>,
    metrics: serde_json::Value,
}

impl RunOutput {
    fn record_input(&mut self, path: &Path) -> CliResult<()> {
        let hash = path_sha256(path).input(&format!("input {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    fn load_base(&mut self, base: &Option<PathBuf>) -> CliResult<UNetModel> {
        let path = base
            .as_ref()
            .ok_or_else(|| CliError::config("no base checkpoint given (set `base` or use --preset fixture)"))?;
        let model = load_checkpoint(path).input(&format!("base checkpoint {}", path.display()))?;
        self.record_input(path)?;
        Ok(model)
    }

    fn load_image(&mut self, path: &Path) -> CliResult<ToyImage> {
        let img = ToyImage::load_png(path).input(&format!("image {}", path.display()))?;
        self.record_input(path)?;
        Ok(img)
    }

    fn load_adapter(&mut self, path: &Path, base: &UNetModel) -> CliResult<LoraAdapter> {
        let adapter = LoraAdapter::load_for(path, base).input(&format!("adapter {}", path.display()))?;
        self.record_input(path)?;
        Ok(adapter)
    }

    fn load_mask(&mut self, path: &Path) -> CliResult<RegionMask> {
        let mask = RegionMask::load_png(path).input(&format!("mask {}", path.display()))?;
        self.record_input(path)?;
        Ok(mask)
    }
}

fn prompt(base: &UNetModel, text: &str) -> CliResult<PromptEmbedding> {
    let tokens = tokenize(text).input(&format!("prompt `{text}`"))?;
    base.embed_prompt(&tokens).input(&format!("prompt `{text}`"))
}

/// Checks an output directory is absent or empty.
fn check_out_dir(out: &Path) -> CliResult<()> {
    if out.exists() {
        let empty = fs::read_dir(out).input(&format!("output directory {}", out.display()))?.next().is_none();
        if !empty {
            return Err(CliError::config(format!("output directory {} is not empty", out.display())));
        }
    }
    Ok(())
}

/// Loads a config file, applies the preset and runs the command into `out`.
pub fn run_command(command: Command, config: &Path, preset: Option<Preset>, out: &Path) -> CliResult<RunManifest> {
    let text = fs::read_to_string(config).input(&format!("config {}", config.display()))?;
    let mut run = RunConfig::parse(command, &text)?;
    let dir = match config.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let dir = std::path::absolute(dir).input(&format!("config {}", config.display()))?;
    run.resolve_paths(&dir);
    check_out_dir(out)?;
    if preset == Some(Preset::Fixture) {
        fixture::apply_preset(&mut run, &fixture::cache_root())?;
    }
    execute(run, preset, out)
}

/// Runs a resolved config into `out` and writes its manifest.
pub fn execute(run: RunConfig, preset: Option<Preset>, out: &Path) -> CliResult<RunManifest> {
    check_out_dir(out)?;
    let schedule = run.schedule().build()?;
    let mut timings = Timings::default();
    let output = match &run {
        RunConfig::TrainBase(c) => train_base_cmd(c, &schedule, &mut timings)?,
        RunConfig::TrainLora(c) => train_lora_cmd(c, &schedule, &mut timings)?,
        RunConfig::Transfer(c) => transfer_cmd(c, &schedule, &mut timings)?,
        RunConfig::TransferMasked(c) => masked_cmd(c, &schedule, &mut timings)?,
        RunConfig::TransferMultistyle(c) => multistyle_cmd(c, &schedule, &mut timings)?,
        RunConfig::AnalyzeFeatures(c) => analyze_cmd(c, &schedule, &mut timings)?,
    };
    fs::create_dir_all(out)?;
    timings.time("write", || output.artifacts.iter().try_for_each(|a| a.write(out)))?;
    let manifest = RunManifest {
        tool: TOOL.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        preset,
        run,
        seeds: output.seeds,
        inputs: output.inputs,
        timings: timings.into_vec(),
        outputs: hash_outputs(out)?,
        metrics: output.metrics,
    };
    manifest.save(out)?;
    Ok(manifest)
}

/// Re-executes a manifest's config into `out` and checks the output hashes.
pub fn rerun(manifest_path: &Path, out: &Path) -> CliResult<RunManifest> {
    let recorded = RunManifest::load(manifest_path)?;
    for (path, hash) in &recorded.inputs {
        let now = path_sha256(Path::new(path)).input(&format!("input {path}"))?;
        if &now != hash {
            return Err(CliError::new(
                ErrorKind::Reproducibility,
                format!("input {path} changed since the recorded run"),
            ));
        }
    }
    let fresh = execute(recorded.run.clone(), recorded.preset, out)?;
    if fresh.outputs != recorded.outputs {
        let differing: BTreeSet<&str> = recorded
            .outputs
            .keys()
            .chain(fresh.outputs.keys())
            .filter(|k| recorded.outputs.get(*k) != fresh.outputs.get(*k))
            .map(String::as_str)
            .collect();
        return Err(CliError::new(
            ErrorKind::Reproducibility,
            format!("outputs differ from the manifest: {}", differing.into_iter().collect::<Vec<_>>().join(", ")),
        ));
    }
    Ok(fresh)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn train_base_cmd(c: &TrainBaseRun, schedule: &NoiseSchedule, timings: &mut Timings) -> CliResult<RunOutput> {
    c.train.validate()?;
    let steps = c.train.steps;
    let (model, report) = timings.time("train", || {
        train_base(&c.train, schedule, |s, loss| {
            if (s + 1) % 100 == 0 || s + 1 == steps {
                log::info!("step {}/{steps} loss {loss:.4}", s + 1);
            }
        })
    })?;
    let window = 100.min(report.losses.len().max(1));
    let mut out = RunOutput {
        metrics: json!({
            "loss_initial_mean": report.initial_mean(window),
            "loss_final_mean": report.final_mean(window),
            "loss_window": window,
            "losses": report.losses,
        }),
        ..Default::default()
    };
    out.seeds.insert(
        "train".into(),
        SeedRecord::new(c.train.seed, &["backbone/init", "train_base/batches"]),
    );
    out.seeds.insert("dataset".into(), SeedRecord::new(c.train.dataset.seed, &["dataset/samples"]));
    out.artifacts.push(Artifact::Checkpoint(CHECKPOINT_DIR.into(), Box::new(model)));
    Ok(out)
}

fn train_lora_cmd(c: &TrainLoraRun, schedule: &NoiseSchedule, timings: &mut Timings) -> CliResult<RunOutput> {
    let mut out = RunOutput::default();
    let base = out.load_base(&c.base)?;
    let style = out.load_image(&c.style_image)?;
    let tokens = tokenize(&c.prompt).input(&format!("prompt `{}`", c.prompt))?;
    c.train.validate()?;
    let steps = c.train.steps;
    let (adapter, report) = timings.time("train", || {
        train_lora(&base, &style, &tokens, &c.train, schedule, |s, loss| {
            if (s + 1) % 50 == 0 || s + 1 == steps {
                log::info!("step {}/{steps} loss {loss:.4}", s + 1);
            }
        })
    })?;
    let window = 20.min(report.losses.len());
    out.metrics = json!({
        "loss_initial_mean": mean(&report.losses[..window]),
        "loss_final_mean": mean(&report.losses[report.losses.len() - window..]),
        "loss_window": window,
        "losses": report.losses,
    });
    out.seeds.insert("lora".into(), SeedRecord::new(c.train.seed, &["lora/init", "lora/samples"]));
    out.artifacts.push(Artifact::Adapter(ADAPTER_DIR.into(), adapter));
    Ok(out)
}

/// Plan and injection settings checked together, before any compute.
fn sampling_plan(
    sampling: &crate::config::SamplingConfig,
    injection: &InjectionConfig,
    schedule: &NoiseSchedule,
) -> CliResult<SamplingPlan> {
    let plan = sampling.build(schedule)?;
    plan.validate(schedule)?;
    injection.validate(plan.num_steps())?;
    Ok(plan)
}

fn stats_json(stats: &InjectionStats) -> serde_json::Value {
    json!({
        "max_row_sum_error": stats.max_row_sum_error,
        "feature_overrides": stats.feature_overrides,
        "attention_overrides": stats.attention_overrides,
    })
}

fn transfer_cmd(c: &TransferRun, schedule: &NoiseSchedule, timings: &mut Timings) -> CliResult<RunOutput> {
    let mut out = RunOutput::default();
    let base = out.load_base(&c.base)?;
    let content = out.load_image(&c.content)?;
    let adapter = match &c.adapter {
        Some(p) => out.load_adapter(p, &base)?,
        None => LoraAdapter::init(&base, DEFAULT_RANK, 1.0, TokenId::lookup("<sss>")?, 0)?,
    };
    let cond = prompt(&base, &c.prompt)?;
    let plan = sampling_plan(&c.sampling, &c.injection, schedule)?;

    let trace = timings.time("capture", || capture_trace(&base, &content, &plan, schedule, &c.injection))?;
    let reconstruction = decode(trace.final_latent());
    let (z, stats) = timings.time("denoise", || {
        guided_denoise_with(&base, Some(&adapter), &trace, &cond, &plan, schedule, &c.injection)
    })?;
    let output = decode(&z);
    out.metrics = json!({
        "inversion_residual": trace.meta.inversion_residual,
        "reconstruction_max_abs_error": reconstruction.max_abs_diff(&content),
        "output_mean_abs_distance_to_content": output.mean_abs_diff(&content),
        "injection": stats_json(&stats),
    });
    out.seeds.insert("sampling".into(), SeedRecord::new(c.sampling.seed, &[]));
    out.artifacts.push(Artifact::Png(OUTPUT_PNG.into(), output));
    out.artifacts.push(Artifact::Png(RECONSTRUCTION_PNG.into(), reconstruction));
    Ok(out)
}

fn masked_cmd(c: &MaskedRun, schedule: &NoiseSchedule, timings: &mut Timings) -> CliResult<RunOutput> {
    let mut out = RunOutput::default();
    let base = out.load_base(&c.base)?;
    let content = out.load_image(&c.content)?;
    let mut loaded = Vec::with_capacity(c.regions.len());
    for r in &c.regions {
        let mask = out.load_mask(&r.mask)?;
        let adapter = out.load_adapter(&r.adapter, &base)?;
        loaded.push((mask, adapter, prompt(&base, &r.prompt)?));
    }
    let spatial = SpatialPlan {
        regions: c
            .regions
            .iter()
            .zip(&loaded)
            .map(|(r, (mask, adapter, p))| SpatialRegion {
                name: format!("{} ({})", r.name, r.mask.display()),
                mask: mask.clone(),
                adapter,
                prompt: p.clone(),
            })
            .collect(),
        background_prompt: prompt(&base, &c.background_prompt)?,
        blend: c.blend,
    };
    spatial.validate()?;
    let plan = sampling_plan(&c.sampling, &c.injection, schedule)?;

    let trace = timings.time("capture", || capture_trace(&base, &content, &plan, schedule, &c.injection))?;
    let run = timings.time("denoise", || {
        masked_multi_lora_denoise(&base, &spatial, &trace, &plan, schedule, &c.injection)
    })?;
    let owners = spatial.owners();
    let background_exact = c.blend == BlendTarget::Latent
        && run.steps.iter().all(|s| {
            let base_z = s.base.as_ref().expect("latent blend keeps the base branch");
            s.combined
                .data()
                .indexed_iter()
                .filter(|((y, x, _), _)| owners[y * base_z.shape().width + x].is_none())
                .all(|(i, v)| v.to_bits() == base_z.data()[i].to_bits())
        });
    let output = decode(&run.latent);
    out.metrics = json!({
        "inversion_residual": trace.meta.inversion_residual,
        "region_cells": c.regions.iter().zip(&loaded).map(|(r, (m, _, _))| (r.name.clone(), m.cell_count())).collect::<BTreeMap<_, _>>(),
        "background_matches_base_branch": background_exact,
        "output_mean_abs_distance_to_content": output.mean_abs_diff(&content),
        "injection": run.stats.iter().map(stats_json).collect::<Vec<_>>(),
    });
    out.seeds.insert("sampling".into(), SeedRecord::new(c.sampling.seed, &[]));
    out.artifacts.push(Artifact::Png(OUTPUT_PNG.into(), output));
    out.artifacts.push(Artifact::Png(RECONSTRUCTION_PNG.into(), decode(trace.final_latent())));
    Ok(out)
}

fn check_name(kind: &str, name: &str) -> CliResult<()> {
    let ok = !name.is_empty() && name.chars().all(|ch| ch.is_ascii_alphanumeric() || "+-_".contains(ch));
    if ok {
        Ok(())
    } else {
        Err(CliError::config(format!("{kind} name `{name}` must use only letters, digits, `+`, `-`, `_`")))
    }
}

fn multistyle_cmd(c: &MultistyleRun, schedule: &NoiseSchedule, timings: &mut Timings) -> CliResult<RunOutput> {
    let mut out = RunOutput::default();
    let base = out.load_base(&c.base)?;
    let content = out.load_image(&c.content)?;
    let mut adapters = BTreeMap::new();
    for (name, a) in &c.adapters {
        check_name("adapter", name)?;
        let adapter = out.load_adapter(&a.path, &base)?;
        adapters.insert(name.clone(), (adapter, prompt(&base, &a.prompt)?));
    }
    if c.plans.is_empty() {
        return Err(CliError::config("no switch plans given"));
    }
    let plan = sampling_plan(&c.sampling, &c.injection, schedule)?;
    let mut temporal = Vec::with_capacity(c.plans.len());
    for p in &c.plans {
        check_name("plan", &p.name)?;
        let mut segments = Vec::with_capacity(p.segments.len());
        for s in &p.segments {
            let (adapter, cond) = adapters.get(&s.adapter).ok_or_else(|| {
                CliError::config(format!("plan `{}` names unknown adapter `{}`", p.name, s.adapter))
            })?;
            segments.push(TemporalSegment {
                name: s.adapter.clone(),
                adapter,
                prompt: cond.clone(),
                start: s.start,
                end: s.end,
            });
        }
        let t = TemporalPlan { segments };
        t.validate(plan.num_steps())
            .map_err(|e| CliError::new(ErrorKind::Plan, format!("plan `{}`: {}", p.name, CliError::from(e).message)))?;
        temporal.push((p.name.clone(), t));
    }

    let trace = timings.time("capture", || capture_trace(&base, &content, &plan, schedule, &c.injection))?;
    let mut plan_images = Vec::with_capacity(temporal.len());
    for (name, t) in &temporal {
        let (z, _) = timings.time(&format!("plan {name}"), || {
            lora_switch_denoise(&base, t, &trace, &plan, schedule, &c.injection)
        })?;
        plan_images.push((name.clone(), decode(&z)));
    }
    let mut singles = Vec::with_capacity(adapters.len());
    for (name, (adapter, cond)) in &adapters {
        let (z, _) = timings.time(&format!("single {name}"), || {
            guided_denoise_with(&base, Some(adapter), &trace, cond, &plan, schedule, &c.injection)
        })?;
        singles.push((name.clone(), decode(&z)));
    }
    let mut pairwise = BTreeMap::new();
    for (i, (a, ia)) in plan_images.iter().enumerate() {
        for (b, ib) in &plan_images[i + 1..] {
            pairwise.insert(format!("{a} vs {b}"), ia.mean_abs_diff(ib));
        }
    }
    out.metrics = json!({
        "inversion_residual": trace.meta.inversion_residual,
        "plan_mean_abs_distance_to_content": plan_images.iter().map(|(n, img)| (n.clone(), img.mean_abs_diff(&content))).collect::<BTreeMap<_, _>>(),
        "plan_pairwise_mean_abs_difference": pairwise,
    });
    out.seeds.insert("sampling".into(), SeedRecord::new(c.sampling.seed, &[]));
    out.artifacts.push(Artifact::Png(OUTPUT_PNG.into(), plan_images[0].1.clone()));
    out.artifacts.push(Artifact::Png(RECONSTRUCTION_PNG.into(), decode(trace.final_latent())));
    for (name, img) in plan_images {
        out.artifacts.push(Artifact::Png(format!("plan-{name}.png"), img));
    }
    for (name, img) in singles {
        out.artifacts.push(Artifact::Png(format!("single-{name}.png"), img));
    }
    Ok(out)
}

fn analyze_cmd(c: &AnalyzeRun, schedule: &NoiseSchedule, timings: &mut Timings) -> CliResult<RunOutput> {
    let mut out = RunOutput::default();
    let base = out.load_base(&c.base)?;
    let mut adapters = BTreeMap::new();
    for (name, path) in &c.adapters {
        check_name("model", name)?;
        if name == BASE_MODEL {
            return Err(CliError::config(format!("model name `{BASE_MODEL}` is reserved for the base model")));
        }
        adapters.insert(name.clone(), out.load_adapter(path, &base)?);
    }
    let model = |name: &str| -> CliResult<StudyModel<'_>> {
        if name == BASE_MODEL {
            return Ok(StudyModel { name: BASE_MODEL, adapter: None });
        }
        let (key, adapter) = adapters
            .get_key_value(name)
            .ok_or_else(|| CliError::config(format!("unknown model `{name}`")))?;
        Ok(StudyModel { name: key, adapter: Some(adapter) })
    };
    let (model_a, model_b) = (model(&c.model_a)?, model(&c.model_b)?);
    c.study.validate()?;
    if c.cases.is_empty() {
        return Err(CliError::config("no study cases given"));
    }
    let mut groups: BTreeMap<&str, Vec<StudyCase>> = BTreeMap::new();
    for case in &c.cases {
        let image = out.load_image(&case.image)?;
        groups.entry(case.group.as_str()).or_default().push(StudyCase {
            name: case.name.clone(),
            image,
            prompt: prompt(&base, &case.prompt)?,
        });
    }
    let pca_name = c.pca_case.clone().unwrap_or_else(|| c.cases[0].name.clone());
    let pca_case = groups
        .values()
        .flatten()
        .find(|case| case.name == pca_name)
        .ok_or_else(|| CliError::config(format!("pca_case `{pca_name}` is not a study case")))?;
    let plan = c.sampling.build(schedule)?;
    plan.validate(schedule)?;

    let mut reports = BTreeMap::new();
    for (group, cases) in &groups {
        let report = timings.time(&format!("similarity {group}"), || {
            cosine_layers(&base, model_a, model_b, cases, &plan, schedule, &c.study)
        })?;
        reports.insert(group.to_string(), report);
    }

    let trace_cfg = InjectionConfig {
        feature_layers: Default::default(),
        attention_layers: Default::default(),
        feature_steps: 0,
        attention_full_steps: 0,
        ..InjectionConfig::default()
    };
    let trace = capture_trace(&base, &pca_case.image, &plan, schedule, &trace_cfg)?;
    let resolutions: BTreeMap<usize, (usize, usize)> = c
        .study
        .layers
        .iter()
        .map(|&l| Ok((l, base.config().decoder_resolution(l)?)))
        .collect::<CliResult<_>>()?;
    let mut explained = BTreeMap::new();
    for m in [model_a, model_b] {
        if explained.contains_key(m.name) {
            continue;
        }
        let feats = timings.time(&format!("pca {}", m.name), || {
            extract_features(&base, m.adapter, &trace.trajectory, &pca_case.prompt, &plan, &c.study)
        })?;
        let mut rows = Vec::with_capacity(feats.len());
        let mut ratios = BTreeMap::new();
        for (layer, f) in feats {
            let p = pca_project(&f, c.study.components)?;
            ratios.insert(layer, json!({ "explained_ratio": p.explained_ratio, "degenerate": p.degenerate }));
            rows.push((layer, p));
        }
        explained.insert(m.name.to_string(), ratios);
        out.artifacts.push(Artifact::PcaGrid {
            name: format!("pca-{}.png", m.name),
            rows,
            resolutions: resolutions.clone(),
        });
    }
    let tables: BTreeMap<&String, String> = reports.iter().map(|(g, r)| (g, r.to_table())).collect();
    for (g, t) in &tables {
        log::info!("group {g}\n{t}");
    }
    let report = json!({ "groups": reports, "pca_case": pca_name, "pca": explained });
    out.metrics = json!({
        "layer_means": reports.iter().map(|(g, r)| (g.clone(), r.layers.iter().map(|l| (l.layer.to_string(), l.mean)).collect::<BTreeMap<_, _>>())).collect::<BTreeMap<_, _>>(),
    });
    out.seeds.insert("sampling".into(), SeedRecord::new(c.sampling.seed, &[]));
    out.artifacts.push(Artifact::Json(REPORT_JSON.into(), report));
    Ok(out)
}
