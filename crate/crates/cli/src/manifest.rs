//! Run manifests: everything needed to re-execute a run and check that it
//! reproduced.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use styler_core::image::{file_sha256, hex_digest};
use styler_core::rng::derive_seed;

use crate::config::RunConfig;
use crate::fixture::Preset;
use crate::error::{CliError, CliResult, InputContext};

pub const RUN_MANIFEST: &str = "manifest.json";
pub const TOOL: &str = "styler";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRecord {
    pub root: u64,
    /// Substream label to the seed its generator is keyed with.
    pub streams: BTreeMap<String, u64>,
}

impl SeedRecord {
    pub fn new(root: u64, labels: &[&str]) -> Self {
        Self {
            root,
            streams: labels.iter().map(|l| (l.to_string(), derive_seed(root, l))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub preset: Option<Preset>,
    /// Fully resolved configuration, tagged with its command.
    #[serde(flatten)]
    pub run: RunConfig,
    /// Stage name to its root seed and derived substreams.
    pub seeds: BTreeMap<String, SeedRecord>,
    /// Input path to SHA-256 (directories hash their sorted file list).
    pub inputs: BTreeMap<String, String>,
    pub timings: Vec<StageTiming>,
    /// Output path, relative to the run directory, to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).input(&format!("manifest {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("invalid manifest {}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(dir.join(RUN_MANIFEST), json)?;
        Ok(())
    }
}

/// SHA-256 of a file, or of a directory's sorted `name:hash` lines.
pub fn path_sha256(path: &Path) -> CliResult<String> {
    if path.is_dir() {
        let mut names: Vec<_> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        let mut listing = String::new();
        for name in names {
            let hash = path_sha256(&path.join(&name))?;
            listing.push_str(&format!("{}:{hash}\n", name.to_string_lossy()));
        }
        Ok(hex_digest(listing.as_bytes()))
    } else {
        Ok(file_sha256(path)?)
    }
}

/// Records the hash of every regular file under `dir`, keyed by relative path.
pub fn hash_outputs(dir: &Path) -> CliResult<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> CliResult<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path != root.join(RUN_MANIFEST) {
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                out.insert(rel, file_sha256(&path)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// Wall-clock stage timer.
#[derive(Default)]
pub struct Timings(Vec<StageTiming>);

impl Timings {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn into_vec(self) -> Vec<StageTiming> {
        self.0
    }
}
