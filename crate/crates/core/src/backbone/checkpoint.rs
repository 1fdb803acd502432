use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{ModelConfig, UNetModel};
use crate::error::Result;
use crate::persist;

pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub architecture: ModelConfig,
    pub seed: u64,
}

pub fn save_checkpoint(model: &UNetModel, dir: &Path) -> Result<()> {
    let tensors = model.params().to_f32();
    let refs: Vec<_> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    persist::save(
        dir,
        CHECKPOINT_KIND,
        CheckpointMeta {
            architecture: model.config().clone(),
            seed: model.seed(),
        },
        &refs,
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<UNetModel> {
    let (manifest, tensors) = persist::load::<CheckpointMeta>(dir, CHECKPOINT_KIND)?;
    let mut model = UNetModel::init(manifest.metadata.architecture, manifest.metadata.seed)?;
    model.params_mut().assign_from(tensors)?;
    Ok(model)
}
