//! Cross-model feature consistency: decoder features of the base and an
//! adapted model on the same content trajectory, their PCA projections and
//! per-layer cosine similarity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::prompt::PromptEmbedding;
use crate::backbone::unet::{check_layer, ForwardHooks, UNetModel, DECODER_LAYERS};
use crate::error::{Error, Result};
use crate::image::{save_gray_png, ToyImage};
use crate::injection::{capture_trace, predict_eps, InjectionConfig};
use crate::lora::LoraAdapter;
use crate::schedule::{NoiseSchedule, SamplingPlan};
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Cosine of the whole flattened feature tensor.
    #[default]
    Flattened,
    /// Mean cosine over spatial locations.
    PerLocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureStudyConfig {
    /// Position in the sampling trajectory, as a fraction of the steps.
    pub timestep_fraction: f64,
    pub layers: BTreeSet<usize>,
    pub components: usize,
    pub aggregation: Aggregation,
}

impl Default for FeatureStudyConfig {
    fn default() -> Self {
        Self {
            timestep_fraction: 0.5,
            layers: (1..=DECODER_LAYERS).collect(),
            components: 3,
            aggregation: Aggregation::Flattened,
        }
    }
}

impl FeatureStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timestep_fraction > 0.0 && self.timestep_fraction < 1.0) {
            return Err(Error::InvalidRange("timestep_fraction must lie in (0, 1)".into()));
        }
        if self.components == 0 {
            return Err(Error::InvalidRange("components must be at least 1".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidRange("layer set is empty".into()));
        }
        for &l in &self.layers {
            check_layer(l)?;
        }
        Ok(())
    }

    /// Denoising step index the study reads.
    pub fn step(&self, num_steps: usize) -> usize {
        ((self.timestep_fraction * num_steps as f64).round() as usize).min(num_steps - 1)
    }
}

struct FeatureTap<'a> {
    layers: &'a BTreeSet<usize>,
    out: BTreeMap<usize, Array2<f32>>,
}

impl ForwardHooks<f32> for FeatureTap<'_> {
    fn feature(&mut self, layer: usize, value: &Array2<f32>) -> Result<Option<Array2<f32>>> {
        if self.layers.contains(&layer) {
            self.out.insert(layer, value.clone());
        }
        Ok(None)
    }
}

/// Decoder features (`h*w x channels` per layer) at the configured step of
/// a trajectory (`trajectory[u]` is the input to step `u`).
pub fn extract_features(
    base: &UNetModel,
    adapter: Option<&LoraAdapter>,
    trajectory: &[LatentTensor],
    prompt: &PromptEmbedding,
    plan: &SamplingPlan,
    cfg: &FeatureStudyConfig,
) -> Result<BTreeMap<usize, Array2<f32>>> {
    cfg.validate()?;
    let u = cfg.step(plan.num_steps());
    let z = trajectory
        .get(u)
        .ok_or_else(|| Error::ConfigMismatch(format!("trajectory has no step {u}")))?;
    let mut tap = FeatureTap {
        layers: &cfg.layers,
        out: BTreeMap::new(),
    };
    predict_eps(base, adapter, z, plan.step(u).0, prompt, &mut tap)?;
    Ok(tap.out)
}

/// Mean-centred PCA over spatial locations (rows).
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `rows x r` scores on the principal axes.
    pub scores: DMatrix<f64>,
    /// `r x channels`, one unit-norm axis per row.
    pub axes: DMatrix<f64>,
    pub explained_ratio: Vec<f64>,
}

impl Pca {
    pub fn fit(features: &Array2<f32>) -> Result<Self> {
        let (n, d) = features.dim();
        if n < 2 || d == 0 {
            return Err(Error::InvalidRange(format!("PCA needs at least 2 samples, got {n}x{d}")));
        }
        let mean: Vec<f64> = (0..d)
            .map(|j| features.column(j).iter().map(|&v| v as f64).sum::<f64>() / n as f64)
            .collect();
        let x = DMatrix::from_fn(n, d, |i, j| features[[i, j]] as f64 - mean[j]);
        let svd = x.svd(true, true);
        let u = svd.u.expect("requested");
        let v_t = svd.v_t.expect("requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
        let r = order.len();
        let scores = DMatrix::from_fn(n, r, |i, c| u[(i, order[c])] * svd.singular_values[order[c]]);
        let axes = DMatrix::from_fn(r, d, |c, j| v_t[(order[c], j)]);
        let explained_ratio = order
            .iter()
            .map(|&i| {
                if total > 0.0 {
                    svd.singular_values[i].powi(2) / total
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            mean,
            scores,
            axes,
            explained_ratio,
        })
    }

    /// Centred features rebuilt from every component.
    pub fn reconstruct_centered(&self) -> DMatrix<f64> {
        &self.scores * &self.axes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// One image per component, values rescaled to `[0, 1]`.
    pub components: Vec<Vec<f32>>,
    /// Length `k`; zero-padded past the data's rank.
    pub explained_ratio: Vec<f64>,
    /// Set when the features were constant; the images are then flat.
    pub degenerate: bool,
}

/// Top-`k` principal-component images of a feature map.
pub fn pca_project(features: &Array2<f32>, k: usize) -> Result<PcaProjection> {
    let n = features.nrows();
    if k == 0 || n < k {
        return Err(Error::InvalidRange(format!("PCA with k = {k} needs at least k samples, got {n}")));
    }
    let pca = Pca::fit(features)?;
    let total: f64 = pca.explained_ratio.iter().sum();
    if total == 0.0 {
        log::warn!("constant feature map; emitting flat component images");
        return Ok(PcaProjection {
            components: vec![vec![0.0; n]; k],
            explained_ratio: vec![0.0; k],
            degenerate: true,
        });
    }
    let mut components = Vec::with_capacity(k);
    let mut explained_ratio = Vec::with_capacity(k);
    for c in 0..k {
        if c >= pca.scores.ncols() {
            components.push(vec![0.0; n]);
            explained_ratio.push(0.0);
            continue;
        }
        let col: Vec<f64> = pca.scores.column(c).iter().copied().collect();
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        components.push(
            col.iter()
                .map(|&v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 })
                .collect(),
        );
        explained_ratio.push(pca.explained_ratio[c]);
    }
    Ok(PcaProjection {
        components,
        explained_ratio,
        degenerate: false,
    })
}

/// Cosine similarity of two equally shaped feature maps. `None` when either
/// is the zero vector.
pub fn cosine(a: &Array2<f32>, b: &Array2<f32>, aggregation: Aggregation) -> Result<Option<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    let cos = |x: &mut dyn Iterator<Item = (f32, f32)>| {
        let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (p, q) in x {
            let (p, q) = (p as f64, q as f64);
            dot += p * q;
            na += p * p;
            nb += q * q;
        }
        if na == 0.0 || nb == 0.0 {
            None
        } else {
            Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
        }
    };
    Ok(match aggregation {
        Aggregation::Flattened => cos(&mut a.iter().copied().zip(b.iter().copied())),
        Aggregation::PerLocation => {
            let mut sum = 0.0;
            for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
                match cos(&mut ra.iter().copied().zip(rb.iter().copied())) {
                    Some(c) => sum += c,
                    None => return Ok(None),
                }
            }
            Some(sum / a.nrows() as f64)
        }
    })
}

/// A model in a comparison: the base, optionally with an adapter.
#[derive(Clone, Copy)]
pub struct StudyModel<'a> {
    pub name: &'a str,
    pub adapter: Option<&'a LoraAdapter>,
}

pub struct StudyCase {
    pub name: String,
    pub image: ToyImage,
    pub prompt: PromptEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub layer: usize,
    pub mean: f64,
    pub cases: usize,
    pub per_case: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub model_a: String,
    pub model_b: String,
    pub aggregation: Aggregation,
    pub step: usize,
    pub timestep: usize,
    pub layers: Vec<LayerSimilarity>,
    pub skipped: Vec<String>,
}

impl SimilarityReport {
    pub fn layer(&self, layer: usize) -> Option<&LayerSimilarity> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} vs {} at step {} (t = {}), {:?}",
            self.model_a, self.model_b, self.step, self.timestep, self.aggregation
        );
        let _ = writeln!(s, "{:>5}  {:>8}  {:>5}", "layer", "cosine", "cases");
        for l in &self.layers {
            let _ = writeln!(s, "{:>5}  {:>8.5}  {:>5}", l.layer, l.mean, l.cases);
        }
        s
    }
}

/// Per-layer cosine similarity between two models' features, each case on
/// its own base-model replay trajectory.
#[allow(clippy::too_many_arguments)]
pub fn cosine_layers(
    base: &UNetModel,
    model_a: StudyModel<'_>,
    model_b: StudyModel<'_>,
    cases: &[StudyCase],
    plan: &SamplingPlan,
    schedule: &NoiseSchedule,
    cfg: &FeatureStudyConfig,
) -> Result<SimilarityReport> {
    cfg.validate()?;
    for a in [model_a.adapter, model_b.adapter].into_iter().flatten() {
        a.check_compatible(base)?;
    }
    let trace_cfg = InjectionConfig {
        feature_layers: BTreeSet::new(),
        attention_layers: BTreeSet::new(),
        feature_steps: 0,
        attention_full_steps: 0,
        ..InjectionConfig::default()
    };
    let mut per_layer: BTreeMap<usize, Vec<f64>> = cfg.layers.iter().map(|&l| (l, Vec::new())).collect();
    let mut skipped = Vec::new();
    for case in cases {
        let trace = capture_trace(base, &case.image, plan, schedule, &trace_cfg)?;
        let fa = extract_features(base, model_a.adapter, &trace.trajectory, &case.prompt, plan, cfg)?;
        let fb = extract_features(base, model_b.adapter, &trace.trajectory, &case.prompt, plan, cfg)?;
        let mut sims = Vec::with_capacity(cfg.layers.len());
        for &l in &cfg.layers {
            match cosine(&fa[&l], &fb[&l], cfg.aggregation)? {
                Some(c) => sims.push((l, c)),
                None => {
                    log::warn!("case `{}` has a zero feature vector at layer {l}; skipped", case.name);
                    skipped.push(case.name.clone());
                    sims.clear();
                    break;
                }
            }
        }
        for (l, c) in sims {
            per_layer.get_mut(&l).expect("layer").push(c);
        }
    }
    let u = cfg.step(plan.num_steps());
    Ok(SimilarityReport {
        model_a: model_a.name.to_string(),
        model_b: model_b.name.to_string(),
        aggregation: cfg.aggregation,
        step: u,
        timestep: plan.step(u).0,
        layers: per_layer
            .into_iter()
            .map(|(layer, v)| LayerSimilarity {
                layer,
                mean: if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 },
                cases: v.len(),
                per_case: v,
            })
            .collect(),
        skipped,
    })
}

/// Tiles component images into one grayscale PNG: one row per layer, one
/// column per component, each tile upscaled (nearest) to `tile x tile`.
pub fn save_component_grid(path: &Path, rows: &[(usize, PcaProjection)], resolution: impl Fn(usize) -> (usize, usize), tile: usize) -> Result<()> {
    let cols = rows.iter().map(|(_, p)| p.components.len()).max().unwrap_or(0);
    if rows.is_empty() || cols == 0 {
        return Err(Error::InvalidRange("nothing to draw".into()));
    }
    let (width, height) = (cols * tile, rows.len() * tile);
    let mut values = vec![0.0f32; width * height];
    for (r, (layer, proj)) in rows.iter().enumerate() {
        let (h, w) = resolution(*layer);
        for (c, comp) in proj.components.iter().enumerate() {
            if comp.len() != h * w {
                return Err(Error::shape(h * w, comp.len()));
            }
            for ty in 0..tile {
                for tx in 0..tile {
                    let v = comp[(ty * h / tile) * w + tx * w / tile];
                    values[(r * tile + ty) * width + c * tile + tx] = v;
                }
            }
        }
    }
    save_gray_png(path, width, height, &values)
}
