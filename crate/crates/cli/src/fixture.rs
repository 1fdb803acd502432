//! The fixture preset: pinned seeds and step counts, procedural inputs, and
//! a cached base checkpoint keyed by the hash of its training config.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use styler_core::backbone::{load_checkpoint, save_checkpoint, train_base, ModelConfig, TrainBaseConfig};
use styler_core::composition::RegionMask;
use styler_core::data::{DatasetConfig, StyleKind};
use styler_core::image::hex_digest;
use styler_core::lora::LoraTrainConfig;
use styler_core::ToyImage;

use crate::config::{RunConfig, SamplingConfig, ScheduleConfig};
use crate::error::CliResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Fixture,
}

/// Overrides the fixture cache location.
pub const CACHE_ENV: &str = "STYLER_FIXTURE_CACHE";

pub const BASE_SEED: u64 = 7;
pub const LORA_SEED: u64 = 11;
/// Dataset seed of the image the style adapters are trained on; disjoint
/// from the training and content images.
pub const STYLE_SOURCE_SEED: u64 = 99;
/// Width in image columns of each of the two fixture masks.
pub const MASK_COLUMNS: usize = 12;

pub fn base_train_config() -> TrainBaseConfig {
    TrainBaseConfig {
        model: ModelConfig::toy(),
        dataset: DatasetConfig::default(),
        steps: 3000,
        batch_size: 8,
        lr: 2e-3,
        weight_decay: 0.0,
        null_prob: 0.1,
        seed: BASE_SEED,
    }
}

pub fn lora_train_config() -> LoraTrainConfig {
    LoraTrainConfig::with_seed(LORA_SEED)
}

pub fn cache_root() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("styler-fixtures"))
}

/// Cache directory name for a base training config.
pub fn base_key(train: &TrainBaseConfig, schedule: &ScheduleConfig) -> String {
    let doc = serde_json::json!({ "train": train, "schedule": schedule });
    format!("base-{}", &hex_digest(doc.to_string().as_bytes())[..16])
}

/// Path of the fixture base checkpoint, training and caching it on first use.
pub fn ensure_base(root: &Path) -> CliResult<PathBuf> {
    let train = base_train_config();
    let schedule = ScheduleConfig::default();
    let dir = root.join(base_key(&train, &schedule));
    if load_checkpoint(&dir).is_ok() {
        return Ok(dir);
    }
    log::info!("training fixture base checkpoint into {}", dir.display());
    let steps = train.steps;
    let (model, _) = train_base(&train, &schedule.build()?, |s, loss| {
        if (s + 1) % 100 == 0 {
            log::info!("base step {}/{steps} loss {loss:.4}", s + 1);
        }
    })?;
    fs::create_dir_all(root)?;
    let staging = root.join(format!("{}.partial-{}", base_key(&train, &schedule), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    save_checkpoint(&model, &staging)?;
    match fs::rename(&staging, &dir) {
        Ok(()) => {}
        // Another process finished first; its checkpoint is identical.
        Err(_) if load_checkpoint(&dir).is_ok() => fs::remove_dir_all(&staging)?,
        Err(e) => return Err(e.into()),
    }
    Ok(dir)
}

/// Pins every seed and step count the fixture runs use, and fills in the
/// cached base checkpoint where none is given.
pub fn apply_preset(run: &mut RunConfig, root: &Path) -> CliResult<()> {
    match run {
        RunConfig::TrainBase(c) => {
            c.train = base_train_config();
            c.schedule = ScheduleConfig::default();
        }
        RunConfig::TrainLora(c) => c.train = lora_train_config(),
        _ => {}
    }
    if let Some(s) = run.sampling_mut() {
        *s = SamplingConfig::default();
    }
    if let Some(base) = run.base_mut() {
        if base.is_none() {
            *base = Some(ensure_base(root)?);
        }
    }
    Ok(())
}

/// Held-out content image `index`, disjoint from the training set.
pub fn content_image(index: usize) -> CliResult<ToyImage> {
    Ok(DatasetConfig::default().held_out(index)?.image)
}

pub fn style_source() -> CliResult<ToyImage> {
    Ok(DatasetConfig {
        seed: STYLE_SOURCE_SEED,
        ..DatasetConfig::default()
    }
    .held_out(0)?
    .image)
}

pub fn style_image(style: StyleKind) -> CliResult<ToyImage> {
    Ok(style.apply(&style_source()?))
}

pub fn style_prompt(style: StyleKind) -> String {
    format!("{} style", style.trigger())
}

/// The two disjoint fixture masks: left and right image columns.
pub fn masks() -> [RegionMask; 2] {
    [RegionMask::left(MASK_COLUMNS), RegionMask::right(MASK_COLUMNS)]
}
