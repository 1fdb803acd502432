//! Spatial (mask-guided) and temporal (LoRA-switch) composition of several
//! adapters on one content trace.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::codec::LATENT_SIZE;
use crate::backbone::prompt::PromptEmbedding;
use crate::backbone::{NoHooks, UNetModel};
use crate::error::{Error, Result};
use crate::image::{load_gray_png, IMAGE_SIZE};
use crate::injection::{guided_eps, InjectionConfig, InjectionStats, InjectionTrace};
use crate::lora::LoraAdapter;
use crate::schedule::{ddim_denoise_step, NoiseSchedule, SamplingPlan};
use crate::tensor::LatentTensor;

/// A binary region at image resolution and its latent-resolution version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    source: Vec<u8>,
    latent: Vec<u8>,
}

/// Latent cell `(y, x)` covers pixels `(2y..2y+2, 2x..2x+2)`; it is set when
/// at least two of the four are set.
pub fn resize_mask(source: &[u8]) -> Result<Vec<u8>> {
    if source.len() != IMAGE_SIZE * IMAGE_SIZE {
        return Err(Error::shape(IMAGE_SIZE * IMAGE_SIZE, source.len()));
    }
    if let Some(&v) = source.iter().find(|&&v| v > 1) {
        return Err(Error::NonBinaryMask(v as f32));
    }
    let mut out = vec![0u8; LATENT_SIZE * LATENT_SIZE];
    for y in 0..LATENT_SIZE {
        for x in 0..LATENT_SIZE {
            let mut count = 0;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                count += source[(2 * y + dy) * IMAGE_SIZE + 2 * x + dx];
            }
            out[y * LATENT_SIZE + x] = u8::from(count >= 2);
        }
    }
    Ok(out)
}

impl RegionMask {
    /// From a row-major 32x32 array of 0/1 values.
    pub fn from_source(source: Vec<u8>) -> Result<Self> {
        let latent = resize_mask(&source)?;
        Ok(Self { source, latent })
    }

    /// From an 8-bit grayscale PNG; values >= 128 are inside.
    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, values) = load_gray_png(path)?;
        if (w, h) != (IMAGE_SIZE, IMAGE_SIZE) {
            return Err(Error::InvalidImage(format!(
                "mask {} is {w}x{h}, expected {IMAGE_SIZE}x{IMAGE_SIZE}",
                path.display()
            )));
        }
        Self::from_source(values.into_iter().map(|v| u8::from(v >= 128)).collect())
    }

    pub fn full() -> Self {
        Self::from_source(vec![1; IMAGE_SIZE * IMAGE_SIZE]).expect("binary")
    }

    pub fn empty() -> Self {
        Self::from_source(vec![0; IMAGE_SIZE * IMAGE_SIZE]).expect("binary")
    }

    /// The left `cols` image columns.
    pub fn left(cols: usize) -> Self {
        Self::from_source(
            (0..IMAGE_SIZE * IMAGE_SIZE)
                .map(|i| u8::from(i % IMAGE_SIZE < cols))
                .collect(),
        )
        .expect("binary")
    }

    /// The right `cols` image columns.
    pub fn right(cols: usize) -> Self {
        Self::from_source(
            (0..IMAGE_SIZE * IMAGE_SIZE)
                .map(|i| u8::from(i % IMAGE_SIZE >= IMAGE_SIZE - cols.min(IMAGE_SIZE)))
                .collect(),
        )
        .expect("binary")
    }

    pub fn source(&self) -> &[u8] {
        &self.source
    }

    pub fn latent(&self) -> &[u8] {
        &self.latent
    }

    pub fn cell(&self, y: usize, x: usize) -> bool {
        self.latent[y * LATENT_SIZE + x] == 1
    }

    pub fn cell_count(&self) -> usize {
        self.latent.iter().map(|&v| v as usize).sum()
    }
}

fn check_mask_shape(z: &LatentTensor) -> Result<()> {
    let s = z.shape();
    if (s.height, s.width) != (LATENT_SIZE, LATENT_SIZE) {
        return Err(Error::shape((LATENT_SIZE, LATENT_SIZE), (s.height, s.width)));
    }
    Ok(())
}

/// `M z_star + (1 - M) z`, cell-wise and broadcast over channels.
pub fn mask_blend(z_star: &LatentTensor, z: &LatentTensor, m: &RegionMask) -> Result<LatentTensor> {
    z_star.check_same_shape(z)?;
    check_mask_shape(z)?;
    let mut out = z.data().clone();
    for ((y, x, c), v) in out.indexed_iter_mut() {
        if m.cell(y, x) {
            *v = z_star.data()[[y, x, c]];
        }
    }
    LatentTensor::from_array(out)
}

/// Which per-branch quantity the masks combine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendTarget {
    /// Each branch takes a full step; the next latents are combined.
    #[default]
    Latent,
    /// Noise predictions are combined and one shared step is taken.
    Eps,
}

#[derive(Debug, Clone)]
pub struct SpatialRegion<'a> {
    /// Used in error messages, e.g. the mask's file name.
    pub name: String,
    pub mask: RegionMask,
    pub adapter: &'a LoraAdapter,
    pub prompt: PromptEmbedding,
}

#[derive(Debug, Clone)]
pub struct SpatialPlan<'a> {
    pub regions: Vec<SpatialRegion<'a>>,
    /// Prompt of the base-model branch outside every mask.
    pub background_prompt: PromptEmbedding,
    pub blend: BlendTarget,
}

impl SpatialPlan<'_> {
    /// Masks must be pairwise disjoint at latent resolution.
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.regions.iter().enumerate() {
            for b in &self.regions[i + 1..] {
                let cells = a
                    .mask
                    .latent()
                    .iter()
                    .zip(b.mask.latent())
                    .filter(|(x, y)| **x == 1 && **y == 1)
                    .count();
                if cells > 0 {
                    return Err(Error::OverlappingMasks {
                        first: a.name.clone(),
                        second: b.name.clone(),
                        cells,
                    });
                }
            }
        }
        Ok(())
    }

    /// Index of the region owning each latent cell, `None` for background.
    pub fn owners(&self) -> Vec<Option<usize>> {
        (0..LATENT_SIZE * LATENT_SIZE)
            .map(|i| self.regions.iter().position(|r| r.mask.latent()[i] == 1))
            .collect()
    }
}

/// Per-step latents of a masked run.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedStep {
    /// Next latent of the base branch (latent blending only).
    pub base: Option<LatentTensor>,
    pub combined: LatentTensor,
}

#[derive(Debug, Clone)]
pub struct MaskedRun {
    pub latent: LatentTensor,
    pub steps: Vec<MaskedStep>,
    pub stats: Vec<InjectionStats>,
}

fn select_cells(owners: &[Option<usize>], background: &LatentTensor, branches: &[LatentTensor]) -> Result<LatentTensor> {
    let mut out = background.data().clone();
    for ((y, x, c), v) in out.indexed_iter_mut() {
        if let Some(i) = owners[y * LATENT_SIZE + x] {
            *v = branches[i].data()[[y, x, c]];
        }
    }
    LatentTensor::from_array(out)
}

/// Every region's adapter runs injected denoising on the same input latent;
/// the base model denoises the background; the masks pick each cell's source.
pub fn masked_multi_lora_denoise(
    base: &UNetModel,
    spatial: &SpatialPlan<'_>,
    trace: &InjectionTrace,
    plan: &SamplingPlan,
    schedule: &NoiseSchedule,
    cfg: &InjectionConfig,
) -> Result<MaskedRun> {
    spatial.validate()?;
    trace.check_covers(plan, cfg)?;
    for r in &spatial.regions {
        r.adapter.check_compatible(base)?;
    }
    check_mask_shape(trace.initial_noise())?;
    let owners = spatial.owners();
    let mut stats = vec![InjectionStats::default(); spatial.regions.len()];
    let mut z = trace.initial_noise().clone();
    let mut steps = Vec::with_capacity(plan.num_steps());
    for u in 0..plan.num_steps() {
        let (t, t_prev) = plan.step(u);
        let eps_base = base.forward(&z, t, &spatial.background_prompt, &mut NoHooks)?;
        let branch_eps: Vec<LatentTensor> = spatial
            .regions
            .par_iter()
            .zip(stats.par_iter_mut())
            .map(|(r, st)| guided_eps(base, Some(r.adapter), trace, &r.prompt, plan, cfg, u, &z, st))
            .collect::<Result<_>>()?;
        let step = match spatial.blend {
            BlendTarget::Latent => {
                let z_base = ddim_denoise_step(&z, &eps_base, t, t_prev, schedule)?;
                let branches: Vec<LatentTensor> = branch_eps
                    .iter()
                    .map(|e| ddim_denoise_step(&z, e, t, t_prev, schedule))
                    .collect::<Result<_>>()?;
                MaskedStep {
                    combined: select_cells(&owners, &z_base, &branches)?,
                    base: Some(z_base),
                }
            }
            BlendTarget::Eps => {
                let eps = select_cells(&owners, &eps_base, &branch_eps)?;
                MaskedStep {
                    combined: ddim_denoise_step(&z, &eps, t, t_prev, schedule)?,
                    base: None,
                }
            }
        };
        z = step.combined.clone();
        steps.push(step);
    }
    Ok(MaskedRun { latent: z, steps, stats })
}

#[derive(Debug, Clone)]
pub struct TemporalSegment<'a> {
    pub name: String,
    pub adapter: &'a LoraAdapter,
    pub prompt: PromptEmbedding,
    /// Performed-step range `[start, end)`.
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone)]
pub struct TemporalPlan<'a> {
    pub segments: Vec<TemporalSegment<'a>>,
}

impl TemporalPlan<'_> {
    /// Ranges must be non-empty, sorted, disjoint and cover `[0, num_steps)`.
    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidPlan("temporal plan has no segments".into()));
        }
        let mut expected = 0;
        for s in &self.segments {
            if s.start >= s.end {
                return Err(Error::InvalidPlan(format!(
                    "segment `{}` has empty range [{}, {})",
                    s.name, s.start, s.end
                )));
            }
            if s.start > expected {
                return Err(Error::InvalidPlan(format!(
                    "gap: steps [{expected}, {}) are not assigned (before segment `{}`)",
                    s.start, s.name
                )));
            }
            if s.start < expected {
                return Err(Error::InvalidPlan(format!(
                    "overlap: segment `{}` [{}, {}) starts before step {expected}",
                    s.name, s.start, s.end
                )));
            }
            expected = s.end;
        }
        if expected != num_steps {
            return Err(Error::InvalidPlan(format!(
                "segments end at step {expected}, but the plan has {num_steps} steps"
            )));
        }
        Ok(())
    }

    fn segment_at(&self, u: usize) -> &TemporalSegment<'_> {
        self.segments
            .iter()
            .find(|s| s.start <= u && u < s.end)
            .expect("validated cover")
    }
}

/// Injected denoising where the active adapter and prompt switch by step range.
pub fn lora_switch_denoise(
    base: &UNetModel,
    temporal: &TemporalPlan<'_>,
    trace: &InjectionTrace,
    plan: &SamplingPlan,
    schedule: &NoiseSchedule,
    cfg: &InjectionConfig,
) -> Result<(LatentTensor, InjectionStats)> {
    temporal.validate(plan.num_steps())?;
    trace.check_covers(plan, cfg)?;
    for s in &temporal.segments {
        s.adapter.check_compatible(base)?;
    }
    let mut stats = InjectionStats::default();
    let mut z = trace.initial_noise().clone();
    for u in 0..plan.num_steps() {
        let seg = temporal.segment_at(u);
        let eps = guided_eps(base, Some(seg.adapter), trace, &seg.prompt, plan, cfg, u, &z, &mut stats)?;
        let (t, t_prev) = plan.step(u);
        z = ddim_denoise_step(&z, &eps, t, t_prev, schedule)?;
    }
    Ok((z, stats))
}
