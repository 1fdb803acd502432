//! Per-command JSON run configurations. Unknown keys are rejected; relative
//! paths resolve against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use styler_core::analysis::FeatureStudyConfig;
use styler_core::backbone::TrainBaseConfig;
use styler_core::composition::BlendTarget;
use styler_core::injection::InjectionConfig;
use styler_core::lora::LoraTrainConfig;
use styler_core::schedule::{
    make_schedule, SamplingPlan, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_SAMPLING_STEPS, DEFAULT_TRAIN_STEPS,
};
use styler_core::NoiseSchedule;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    TrainBase,
    TrainLora,
    Transfer,
    TransferMasked,
    TransferMultistyle,
    AnalyzeFeatures,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainBase => "train-base",
            Command::TrainLora => "train-lora",
            Command::Transfer => "transfer",
            Command::TransferMasked => "transfer-masked",
            Command::TransferMultistyle => "transfer-multistyle",
            Command::AnalyzeFeatures => "analyze-features",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_train: DEFAULT_TRAIN_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> CliResult<NoiseSchedule> {
        Ok(make_schedule(self.t_train, self.beta_start, self.beta_end)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub num_steps: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            num_steps: DEFAULT_SAMPLING_STEPS,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn build(&self, schedule: &NoiseSchedule) -> CliResult<SamplingPlan> {
        Ok(SamplingPlan::new(schedule, self.num_steps, self.seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBaseRun {
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub train: TrainBaseConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainLoraRun {
    /// Base checkpoint directory; optional only under the fixture preset.
    #[serde(default)]
    pub base: Option<PathBuf>,
    pub style_image: PathBuf,
    pub prompt: String,
    pub train: LoraTrainConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferRun {
    #[serde(default)]
    pub base: Option<PathBuf>,
    pub content: PathBuf,
    /// Adapter directory; omitted means a zero adapter.
    #[serde(default)]
    pub adapter: Option<PathBuf>,
    #[serde(default)]
    pub prompt: String,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub injection: InjectionConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub name: String,
    /// Binary 32x32 grayscale PNG (>= 128 is inside).
    pub mask: PathBuf,
    pub adapter: PathBuf,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskedRun {
    #[serde(default)]
    pub base: Option<PathBuf>,
    pub content: PathBuf,
    #[serde(default)]
    pub regions: Vec<RegionConfig>,
    #[serde(default)]
    pub background_prompt: String,
    #[serde(default)]
    pub blend: BlendTarget,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub injection: InjectionConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterRef {
    pub path: PathBuf,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub adapter: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchPlanConfig {
    pub name: String,
    pub segments: Vec<SegmentConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultistyleRun {
    #[serde(default)]
    pub base: Option<PathBuf>,
    pub content: PathBuf,
    pub adapters: BTreeMap<String, AdapterRef>,
    pub plans: Vec<SwitchPlanConfig>,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub injection: InjectionConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub name: String,
    pub image: PathBuf,
    #[serde(default)]
    pub prompt: String,
    /// Cases are reported per group, e.g. in-domain versus out-of-domain.
    #[serde(default = "default_group")]
    pub group: String,
}

fn default_group() -> String {
    "all".into()
}

/// Model name reserved for the adapter-free base model.
pub const BASE_MODEL: &str = "base";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeRun {
    #[serde(default)]
    pub base: Option<PathBuf>,
    #[serde(default)]
    pub adapters: BTreeMap<String, PathBuf>,
    #[serde(default = "default_model_a")]
    pub model_a: String,
    pub model_b: String,
    pub cases: Vec<CaseConfig>,
    #[serde(default)]
    pub study: FeatureStudyConfig,
    /// Case whose features are drawn as PCA grids; defaults to the first.
    #[serde(default)]
    pub pca_case: Option<String>,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

fn default_model_a() -> String {
    BASE_MODEL.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "config", rename_all = "kebab-case")]
pub enum RunConfig {
    TrainBase(TrainBaseRun),
    TrainLora(TrainLoraRun),
    Transfer(TransferRun),
    TransferMasked(MaskedRun),
    TransferMultistyle(MultistyleRun),
    AnalyzeFeatures(AnalyzeRun),
}

fn resolve(dir: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = dir.join(&*p);
    }
}

fn resolve_opt(dir: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(dir, p);
    }
}

impl RunConfig {
    /// Parses a command's JSON document; unknown keys are errors.
    pub fn parse(command: Command, text: &str) -> CliResult<Self> {
        let parse_err = |e: serde_json::Error| CliError::config(format!("invalid {} config: {e}", command.name()));
        Ok(match command {
            Command::TrainBase => RunConfig::TrainBase(serde_json::from_str(text).map_err(parse_err)?),
            Command::TrainLora => RunConfig::TrainLora(serde_json::from_str(text).map_err(parse_err)?),
            Command::Transfer => RunConfig::Transfer(serde_json::from_str(text).map_err(parse_err)?),
            Command::TransferMasked => RunConfig::TransferMasked(serde_json::from_str(text).map_err(parse_err)?),
            Command::TransferMultistyle => RunConfig::TransferMultistyle(serde_json::from_str(text).map_err(parse_err)?),
            Command::AnalyzeFeatures => RunConfig::AnalyzeFeatures(serde_json::from_str(text).map_err(parse_err)?),
        })
    }

    pub fn command(&self) -> Command {
        match self {
            RunConfig::TrainBase(_) => Command::TrainBase,
            RunConfig::TrainLora(_) => Command::TrainLora,
            RunConfig::Transfer(_) => Command::Transfer,
            RunConfig::TransferMasked(_) => Command::TransferMasked,
            RunConfig::TransferMultistyle(_) => Command::TransferMultistyle,
            RunConfig::AnalyzeFeatures(_) => Command::AnalyzeFeatures,
        }
    }

    /// Makes every path absolute relative to `dir`.
    pub fn resolve_paths(&mut self, dir: &Path) {
        match self {
            RunConfig::TrainBase(_) => {}
            RunConfig::TrainLora(c) => {
                resolve_opt(dir, &mut c.base);
                resolve(dir, &mut c.style_image);
            }
            RunConfig::Transfer(c) => {
                resolve_opt(dir, &mut c.base);
                resolve(dir, &mut c.content);
                resolve_opt(dir, &mut c.adapter);
            }
            RunConfig::TransferMasked(c) => {
                resolve_opt(dir, &mut c.base);
                resolve(dir, &mut c.content);
                for r in &mut c.regions {
                    resolve(dir, &mut r.mask);
                    resolve(dir, &mut r.adapter);
                }
            }
            RunConfig::TransferMultistyle(c) => {
                resolve_opt(dir, &mut c.base);
                resolve(dir, &mut c.content);
                for a in c.adapters.values_mut() {
                    resolve(dir, &mut a.path);
                }
            }
            RunConfig::AnalyzeFeatures(c) => {
                resolve_opt(dir, &mut c.base);
                for p in c.adapters.values_mut() {
                    resolve(dir, p);
                }
                for case in &mut c.cases {
                    resolve(dir, &mut case.image);
                }
            }
        }
    }

    pub fn base_mut(&mut self) -> Option<&mut Option<PathBuf>> {
        match self {
            RunConfig::TrainBase(_) => None,
            RunConfig::TrainLora(c) => Some(&mut c.base),
            RunConfig::Transfer(c) => Some(&mut c.base),
            RunConfig::TransferMasked(c) => Some(&mut c.base),
            RunConfig::TransferMultistyle(c) => Some(&mut c.base),
            RunConfig::AnalyzeFeatures(c) => Some(&mut c.base),
        }
    }

    pub fn sampling_mut(&mut self) -> Option<&mut SamplingConfig> {
        match self {
            RunConfig::TrainBase(_) | RunConfig::TrainLora(_) => None,
            RunConfig::Transfer(c) => Some(&mut c.sampling),
            RunConfig::TransferMasked(c) => Some(&mut c.sampling),
            RunConfig::TransferMultistyle(c) => Some(&mut c.sampling),
            RunConfig::AnalyzeFeatures(c) => Some(&mut c.sampling),
        }
    }

    pub fn schedule(&self) -> &ScheduleConfig {
        match self {
            RunConfig::TrainBase(c) => &c.schedule,
            RunConfig::TrainLora(c) => &c.schedule,
            RunConfig::Transfer(c) => &c.schedule,
            RunConfig::TransferMasked(c) => &c.schedule,
            RunConfig::TransferMultistyle(c) => &c.schedule,
            RunConfig::AnalyzeFeatures(c) => &c.schedule,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_transfer_config_takes_the_documented_defaults() {
        let run = RunConfig::parse(Command::Transfer, r#"{"content": "c.png"}"#).unwrap();
        let RunConfig::Transfer(c) = run else { panic!("wrong variant") };
        assert_eq!(c.sampling, SamplingConfig { num_steps: 50, seed: 0 });
        assert_eq!(c.injection.feature_steps, 30);
        assert_eq!(c.injection.attention_full_steps, 25);
        assert_eq!(c.schedule, ScheduleConfig::default());
        assert!(c.adapter.is_none() && c.prompt.is_empty());
    }

    #[test]
    fn lora_config_defaults_to_rank_16() {
        let run = RunConfig::parse(
            Command::TrainLora,
            r#"{"style_image": "s.png", "prompt": "<stripe> style", "train": {"seed": 3}}"#,
        )
        .unwrap();
        let RunConfig::TrainLora(c) = run else { panic!("wrong variant") };
        assert_eq!(c.train.rank, 16);
        assert_eq!(c.train.seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let err = RunConfig::parse(Command::Transfer, r#"{"content": "c.png", "stepz": 3}"#).unwrap_err();
        assert_eq!(err.kind, crate::error::ErrorKind::Config);
        assert!(err.message.contains("stepz"), "{}", err.message);
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let mut run = RunConfig::parse(Command::Transfer, r#"{"content": "c.png", "base": "/abs/base"}"#).unwrap();
        run.resolve_paths(Path::new("/work"));
        let RunConfig::Transfer(c) = &run else { panic!("wrong variant") };
        assert_eq!(c.content, Path::new("/work/c.png"));
        assert_eq!(c.base.as_deref(), Some(Path::new("/abs/base")));
    }

    #[test]
    fn tagged_form_round_trips() {
        let run = RunConfig::parse(Command::TransferMasked, r#"{"content": "c.png"}"#).unwrap();
        let text = serde_json::to_string(&run).unwrap();
        assert!(text.contains(r#""command":"transfer-masked""#));
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), run);
    }
}
