//! Cross-model feature and attention injection.
//!
//! The content image is DDIM-inverted with the base model and replayed
//! unconditionally; the replay records decoder features and attention
//! queries/keys ([`InjectionTrace`]). Styled sampling then starts from the
//! same initial noise and, step by step, swaps in the recorded features and
//! overrides or blends the self-attention maps.
//!
//! Step indices `u` count performed denoising steps from the noisy end, so
//! "the first `N_f` steps" are the high-noise ones.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backbone::prompt::PromptEmbedding;
use crate::backbone::unet::{check_layer, AttnKind, AttnSite, ForwardHooks, UNetModel, DECODER_LAYERS};
use crate::backbone::{encode, NoHooks};
use crate::error::{Error, Result};
use crate::image::ToyImage;
use crate::lora::{AdaptedModel, LoraAdapter};
use crate::ops;
use crate::persist;
use crate::schedule::{ddim_denoise_step, ddim_invert_step, NoiseSchedule, SamplingPlan};
use crate::tensor::LatentTensor;

pub const TRACE_KIND: &str = "trace";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AttentionMode {
    /// Content maps for the first `N_a` steps, the styled model's own after.
    Partial,
    /// Content maps at every step.
    Full,
    /// Content maps for the first `N_a` steps, then a blend decaying toward
    /// the styled model's own maps.
    Adaptive,
}

/// Fixed-point refinement of each inversion step: the noise estimate is
/// re-evaluated at the inverted point until the step stops moving. The
/// iteration is Anderson-accelerated, since the steps nearest the clean end
/// barely contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub max_refinements: usize,
    pub tolerance: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            max_refinements: 20,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectionConfig {
    pub feature_layers: BTreeSet<usize>,
    /// Feature override is active for steps `u < feature_steps`.
    pub feature_steps: usize,
    pub attention_layers: BTreeSet<usize>,
    /// Full attention override for steps `u < attention_full_steps`.
    pub attention_full_steps: usize,
    pub attention_mode: AttentionMode,
    pub guidance_scale: f64,
    /// Also override cross-attention maps at `attention_layers`.
    pub inject_cross_attention: bool,
    pub inversion: InversionConfig,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            feature_layers: BTreeSet::from([2]),
            feature_steps: 30,
            attention_layers: (1..=DECODER_LAYERS).collect(),
            attention_full_steps: 25,
            attention_mode: AttentionMode::Adaptive,
            guidance_scale: 1.0,
            inject_cross_attention: false,
            inversion: InversionConfig::default(),
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self, num_steps: usize) -> Result<()> {
        for &l in self.feature_layers.iter().chain(&self.attention_layers) {
            check_layer(l)?;
        }
        if self.feature_steps > num_steps || self.attention_full_steps > num_steps {
            return Err(Error::InvalidRange(format!(
                "step thresholds ({}, {}) must not exceed {num_steps} steps",
                self.feature_steps, self.attention_full_steps
            )));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::InvalidRange("guidance_scale must be finite".into()));
        }
        Ok(())
    }

    fn attention_kinds(&self) -> &'static [AttnKind] {
        if self.inject_cross_attention {
            &[AttnKind::SelfAttn, AttnKind::CrossAttn]
        } else {
            &[AttnKind::SelfAttn]
        }
    }

    /// Attention sites the trace must cover.
    pub fn attention_sites(&self) -> Vec<AttnSite> {
        self.attention_layers
            .iter()
            .flat_map(|&layer| self.attention_kinds().iter().map(move |&kind| AttnSite { layer, kind }))
            .collect()
    }

    fn attends(&self, site: AttnSite) -> bool {
        self.attention_layers.contains(&site.layer) && self.attention_kinds().contains(&site.kind)
    }

    fn injects_feature(&self, u: usize, layer: usize) -> bool {
        u < self.feature_steps && self.feature_layers.contains(&layer)
    }
}

/// `(u - N_a) / (S - N_a)`, defined for `N_a <= u < S`.
pub fn kappa(u: usize, n_a: usize, s: usize) -> Result<f64> {
    if n_a >= s {
        return Err(Error::Domain(format!("N_a = {n_a} leaves no adaptive steps out of {s}")));
    }
    if u < n_a || u >= s {
        return Err(Error::Domain(format!("step {u} outside the adaptive phase [{n_a}, {s})")));
    }
    Ok((u - n_a) as f64 / (s - n_a) as f64)
}

/// The attention map the styled pass uses at step `u`, or `None` to keep its
/// own. Blends are `A_src + kappa (A_lora - A_src)`, which returns `A_src`
/// bit-for-bit when the two maps agree.
pub fn blend_weight(mode: AttentionMode, u: usize, n_a: usize, s: usize) -> Result<Option<f64>> {
    if u >= s {
        return Err(Error::Domain(format!("step {u} outside [0, {s})")));
    }
    Ok(match mode {
        AttentionMode::Full => Some(0.0),
        _ if u < n_a => Some(0.0),
        AttentionMode::Partial => None,
        AttentionMode::Adaptive => Some(kappa(u, n_a, s)?),
    })
}

pub fn blend_attention(
    a_src: &Array2<f32>,
    a_lora: &Array2<f32>,
    u: usize,
    num_steps: usize,
    cfg: &InjectionConfig,
) -> Result<Array2<f32>> {
    if a_src.dim() != a_lora.dim() {
        return Err(Error::shape(a_src.dim(), a_lora.dim()));
    }
    Ok(match blend_weight(cfg.attention_mode, u, cfg.attention_full_steps, num_steps)? {
        None => a_lora.clone(),
        Some(k) => mix(a_src, a_lora, k as f32),
    })
}

fn mix(a_src: &Array2<f32>, a_lora: &Array2<f32>, k: f32) -> Array2<f32> {
    if k == 0.0 {
        return a_src.clone();
    }
    ndarray::Zip::from(a_src)
        .and(a_lora)
        .map_collect(|&s, &l| s + k * (l - s))
}

/// Queries and keys of one attention block, all heads side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub q: Array2<f32>,
    pub k: Array2<f32>,
}

impl AttentionRecord {
    /// Row-stochastic map of each head.
    pub fn maps(&self, heads: usize, head_dim: usize) -> Result<Vec<Array2<f32>>> {
        if self.q.ncols() != heads * head_dim || self.k.ncols() != heads * head_dim {
            return Err(Error::shape(heads * head_dim, (self.q.ncols(), self.k.ncols())));
        }
        // Same rounding as the forward pass.
        let scale = (1.0 / (head_dim as f64).sqrt()) as f32;
        Ok((0..heads)
            .map(|h| {
                let q = ops::slice_cols(&self.q.view(), h * head_dim, head_dim);
                let k = ops::slice_cols(&self.k.view(), h * head_dim, head_dim);
                ops::attention_map(&q.view(), &k.view(), scale)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceMeta {
    pub timesteps: Vec<usize>,
    pub seed: u64,
    pub feature_layers: BTreeSet<usize>,
    pub feature_steps: usize,
    pub attention_sites: Vec<(usize, AttnKind)>,
    pub content_sha256: String,
    /// Largest per-step change left by the inversion refinement.
    pub inversion_residual: f64,
}

/// Everything the styled pass needs from the content pass.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionTrace {
    pub meta: TraceMeta,
    /// `trajectory[u]` is the replay's input to step `u`; `trajectory[S]` is
    /// its final latent. `trajectory[0]` is the shared initial noise.
    pub trajectory: Vec<LatentTensor>,
    pub features: BTreeMap<(usize, usize), Array2<f32>>,
    pub attention: BTreeMap<(usize, AttnSite), AttentionRecord>,
}

impl InjectionTrace {
    pub fn initial_noise(&self) -> &LatentTensor {
        &self.trajectory[0]
    }

    pub fn final_latent(&self) -> &LatentTensor {
        self.trajectory.last().expect("trajectory is never empty")
    }

    pub fn num_steps(&self) -> usize {
        self.meta.timesteps.len()
    }

    pub fn feature(&self, u: usize, layer: usize) -> Result<&Array2<f32>> {
        self.features
            .get(&(u, layer))
            .ok_or_else(|| Error::ConfigMismatch(format!("trace has no feature for step {u}, layer {layer}")))
    }

    pub fn attention_record(&self, u: usize, site: AttnSite) -> Result<&AttentionRecord> {
        self.attention.get(&(u, site)).ok_or_else(|| {
            Error::ConfigMismatch(format!(
                "trace has no {:?} attention for step {u}, layer {}",
                site.kind, site.layer
            ))
        })
    }

    /// Errors unless the trace was captured for `plan` and covers `cfg`.
    pub fn check_covers(&self, plan: &SamplingPlan, cfg: &InjectionConfig) -> Result<()> {
        if self.meta.timesteps != plan.timesteps || self.meta.seed != plan.seed {
            return Err(Error::ConfigMismatch("trace was captured with a different sampling plan".into()));
        }
        cfg.validate(plan.num_steps())?;
        for u in 0..plan.num_steps() {
            for &layer in &cfg.feature_layers {
                if cfg.injects_feature(u, layer) {
                    self.feature(u, layer)?;
                }
            }
            for site in cfg.attention_sites() {
                self.attention_record(u, site)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Array2<f32>)> = Vec::new();
        for (u, z) in self.trajectory.iter().enumerate() {
            tensors.push((format!("trajectory.{u}"), z.tokens().to_owned()));
        }
        for ((u, layer), f) in &self.features {
            tensors.push((format!("feature.{u}.{layer}"), f.clone()));
        }
        for ((u, site), rec) in &self.attention {
            let kind = kind_name(site.kind);
            tensors.push((format!("attention.{u}.{}.{kind}.q", site.layer), rec.q.clone()));
            tensors.push((format!("attention.{u}.{}.{kind}.k", site.layer), rec.k.clone()));
        }
        let refs: Vec<(String, &Array2<f32>)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        persist::save(dir, TRACE_KIND, &self.meta, &refs)?;
        Ok(())
    }

    pub fn load(dir: &Path, latent: crate::tensor::LatentShape) -> Result<Self> {
        let (manifest, tensors) = persist::load::<TraceMeta>(dir, TRACE_KIND)?;
        let corrupt = |name: &str| Error::CorruptFile {
            path: dir.to_path_buf(),
            reason: format!("unexpected tensor `{name}`"),
        };
        let mut trajectory = Vec::new();
        let mut features = BTreeMap::new();
        let mut attention: BTreeMap<(usize, AttnSite), (Option<Array2<f32>>, Option<Array2<f32>>)> = BTreeMap::new();
        for (name, t) in tensors {
            let parts: Vec<&str> = name.split('.').collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| corrupt(&name));
            match parts.as_slice() {
                ["trajectory", u] => {
                    if num(u)? != trajectory.len() {
                        return Err(corrupt(&name));
                    }
                    trajectory.push(LatentTensor::from_tokens(latent, &t)?);
                }
                ["feature", u, l] => {
                    features.insert((num(u)?, num(l)?), t);
                }
                ["attention", u, l, kind, qk] => {
                    let kind = match *kind {
                        "self" => AttnKind::SelfAttn,
                        "cross" => AttnKind::CrossAttn,
                        _ => return Err(corrupt(&name)),
                    };
                    let slot = attention
                        .entry((num(u)?, AttnSite { layer: num(l)?, kind }))
                        .or_default();
                    match *qk {
                        "q" => slot.0 = Some(t),
                        "k" => slot.1 = Some(t),
                        _ => return Err(corrupt(&name)),
                    }
                }
                _ => return Err(corrupt(&name)),
            }
        }
        let attention = attention
            .into_iter()
            .map(|(key, pair)| match pair {
                (Some(q), Some(k)) => Ok((key, AttentionRecord { q, k })),
                _ => Err(corrupt("attention record without both q and k")),
            })
            .collect::<Result<_>>()?;
        if trajectory.len() != manifest.metadata.timesteps.len() + 1 {
            return Err(corrupt("trajectory length"));
        }
        Ok(Self {
            meta: manifest.metadata,
            trajectory,
            features,
            attention,
        })
    }
}

fn kind_name(kind: AttnKind) -> &'static str {
    match kind {
        AttnKind::SelfAttn => "self",
        AttnKind::CrossAttn => "cross",
    }
}

/// Noise prediction of the base model or, with an adapter, the adapted model.
pub fn predict_eps(
    base: &UNetModel,
    adapter: Option<&LoraAdapter>,
    z_t: &LatentTensor,
    t: usize,
    c: &PromptEmbedding,
    hooks: &mut dyn ForwardHooks<f32>,
) -> Result<LatentTensor> {
    match adapter {
        Some(a) => AdaptedModel { base, adapter: a }.forward(z_t, t, c, hooks),
        None => base.forward(z_t, t, c, hooks),
    }
}

/// DDIM inversion of a clean latent to the plan's noisiest timestep. Returns
/// the inverted latent and the largest residual step change left by the
/// fixed-point refinement.
pub fn ddim_invert(
    model: &UNetModel,
    z0: &LatentTensor,
    c: &PromptEmbedding,
    plan: &SamplingPlan,
    schedule: &NoiseSchedule,
    cfg: &InversionConfig,
) -> Result<(LatentTensor, f64)> {
    plan.validate(schedule)?;
    let mut z = z0.clone();
    let mut residual = 0.0f64;
    for u in (0..plan.num_steps()).rev() {
        let (t, t_prev) = plan.step(u);
        // First guess uses the noise estimate at the clean side of the step.
        let eps = model.forward(&z, t_prev.unwrap_or(0), c, &mut NoHooks)?;
        let first = ddim_invert_step(&z, &eps, t_prev, t, schedule)?;
        let (next, change) = anderson(first, cfg, |x| {
            let eps = model.forward(x, t, c, &mut NoHooks)?;
            ddim_invert_step(&z, &eps, t_prev, t, schedule)
        })?;
        if cfg.max_refinements > 0 {
            residual = residual.max(change);
        }
        z = next;
    }
    Ok((z, residual))
}

/// History length of the Anderson mixing in [`anderson`].
const ANDERSON_DEPTH: usize = 5;

/// Anderson-accelerated fixed-point iteration of `g` from `x`. Returns the
/// image `g(x)` of the iterate with the smallest step change, and that change.
fn anderson(
    mut x: LatentTensor,
    cfg: &InversionConfig,
    mut g: impl FnMut(&LatentTensor) -> Result<LatentTensor>,
) -> Result<(LatentTensor, f64)> {
    let flat = |t: &LatentTensor| -> Vec<f64> { t.data().iter().map(|&v| v as f64).collect() };
    let mut best: Option<(LatentTensor, f64)> = None;
    let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for _ in 0..cfg.max_refinements {
        let gx = g(&x)?;
        let change = gx.max_abs_diff(&x) as f64;
        let gv = flat(&gx);
        let fv: Vec<f64> = gv.iter().zip(flat(&x)).map(|(g, x)| g - x).collect();
        if best.as_ref().is_none_or(|(_, c)| change < *c) {
            best = Some((gx, change));
        }
        if change <= cfg.tolerance {
            break;
        }
        if let Some((pf, pg)) = prev.take() {
            let df = fv.iter().zip(&pf).map(|(a, b)| a - b).collect();
            let dg = gv.iter().zip(&pg).map(|(a, b)| a - b).collect();
            history.push((df, dg));
            if history.len() > ANDERSON_DEPTH {
                history.remove(0);
            }
        }
        let mut next = gv.clone();
        if !history.is_empty() {
            let m = history.len();
            let gram = DMatrix::from_fn(m, m, |i, j| dot(&history[i].0, &history[j].0));
            let rhs = DVector::from_fn(m, |i, _| dot(&history[i].0, &fv));
            let ridge = 1e-10 * gram.trace().max(f64::MIN_POSITIVE);
            let gamma = (gram + DMatrix::identity(m, m) * ridge).lu().solve(&rhs);
            if let Some(gamma) = gamma.filter(|g| g.iter().all(|v| v.is_finite())) {
                for (k, (_, dg)) in history.iter().enumerate() {
                    for (n, d) in next.iter_mut().zip(dg) {
                        *n -= gamma[k] * d;
                    }
                }
            }
        }
        let shape = x.data().raw_dim();
        x = LatentTensor::from_array(Array3::from_shape_vec(shape, next.iter().map(|&v| v as f32).collect()).expect("same shape"))?;
        prev = Some((fv, gv));
    }
    Ok(best.unwrap_or((x, f64::INFINITY)))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain deterministic sampling from `z_start`.
pub fn ddim_sample(
    base: &UNetModel,
    adapter: Option<&LoraAdapter>,
    z_start: &LatentTensor,
    c: &PromptEmbedding,
    plan: &SamplingPlan,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    let mut z = z_start.clone();
    for u in 0..plan.num_steps() {
        let (t, t_prev) = plan.step(u);
        let eps = predict_eps(base, adapter, &z, t, c, &mut NoHooks)?;
        z = ddim_denoise_step(&z, &eps, t, t_prev, schedule)?;
    }
    Ok(z)
}

struct CaptureHooks<'a> {
    u: usize,
    cfg: &'a InjectionConfig,
    features: &'a mut BTreeMap<(usize, usize), Array2<f32>>,
    attention: &'a mut BTreeMap<(usize, AttnSite), AttentionRecord>,
}

impl ForwardHooks<f32> for CaptureHooks<'_> {
    fn feature(&mut self, layer: usize, value: &Array2<f32>) -> Result<Option<Array2<f32>>> {
        if self.cfg.injects_feature(self.u, layer) {
            self.features.insert((self.u, layer), value.clone());
        }
        Ok(None)
    }

    fn attention(
        &mut self,
        site: AttnSite,
        q: &Array2<f32>,
        k: &Array2<f32>,
        _probs: &[&Array2<f32>],
    ) -> Result<Option<Vec<Array2<f32>>>> {
        if self.cfg.attends(site) {
            self.attention.insert(
                (self.u, site),
                AttentionRecord {
                    q: q.clone(),
                    k: k.clone(),
                },
            );
        }
        Ok(None)
    }
}

/// Inverts the content image with the unconditional base model and replays
/// the unconditional trajectory, recording what `cfg` asks for.
pub fn capture_trace(
    base: &UNetModel,
    content: &ToyImage,
    plan: &SamplingPlan,
    schedule: &NoiseSchedule,
    cfg: &InjectionConfig,
) -> Result<InjectionTrace> {
    plan.validate(schedule)?;
    cfg.validate(plan.num_steps())?;
    let null = base.null_prompt();
    let z0 = encode(content);
    let (z_noise, residual) = ddim_invert(base, &z0, &null, plan, schedule, &cfg.inversion)?;
    let mut features = BTreeMap::new();
    let mut attention = BTreeMap::new();
    let mut trajectory = vec![z_noise];
    for u in 0..plan.num_steps() {
        let (t, t_prev) = plan.step(u);
        let z = trajectory.last().expect("non-empty");
        let mut hooks = CaptureHooks {
            u,
            cfg,
            features: &mut features,
            attention: &mut attention,
        };
        let eps = base.forward(z, t, &null, &mut hooks)?;
        let next = ddim_denoise_step(z, &eps, t, t_prev, schedule)?;
        trajectory.push(next);
    }
    Ok(InjectionTrace {
        meta: TraceMeta {
            timesteps: plan.timesteps.clone(),
            seed: plan.seed,
            feature_layers: cfg.feature_layers.clone(),
            feature_steps: cfg.feature_steps,
            attention_sites: cfg.attention_sites().iter().map(|s| (s.layer, s.kind)).collect(),
            content_sha256: content.sha256(),
            inversion_residual: residual,
        },
        trajectory,
        features,
        attention,
    })
}

/// Observations from an injected run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InjectionStats {
    /// Largest `|row sum - 1|` over every map the styled pass used.
    pub max_row_sum_error: f64,
    /// Weight on the content map per step where a blend was applied.
    pub source_weights: BTreeMap<usize, f64>,
    pub feature_overrides: usize,
    pub attention_overrides: usize,
}

struct InjectHooks<'a> {
    u: usize,
    num_steps: usize,
    heads: usize,
    head_dim: usize,
    trace: &'a InjectionTrace,
    cfg: &'a InjectionConfig,
    stats: &'a mut InjectionStats,
}

impl ForwardHooks<f32> for InjectHooks<'_> {
    fn feature(&mut self, layer: usize, _value: &Array2<f32>) -> Result<Option<Array2<f32>>> {
        if !self.cfg.injects_feature(self.u, layer) {
            return Ok(None);
        }
        self.stats.feature_overrides += 1;
        Ok(Some(self.trace.feature(self.u, layer)?.clone()))
    }

    fn attention(
        &mut self,
        site: AttnSite,
        _q: &Array2<f32>,
        _k: &Array2<f32>,
        probs: &[&Array2<f32>],
    ) -> Result<Option<Vec<Array2<f32>>>> {
        if !self.cfg.attends(site) {
            return Ok(None);
        }
        let weight = blend_weight(
            self.cfg.attention_mode,
            self.u,
            self.cfg.attention_full_steps,
            self.num_steps,
        )?;
        let Some(k) = weight else {
            return Ok(None);
        };
        let src = self
            .trace
            .attention_record(self.u, site)?
            .maps(self.heads, self.head_dim)?;
        if src.len() != probs.len() {
            return Err(Error::shape(probs.len(), src.len()));
        }
        let mut out = Vec::with_capacity(src.len());
        for (s, l) in src.iter().zip(probs) {
            if s.dim() != l.dim() {
                return Err(Error::shape(s.dim(), l.dim()));
            }
            let m = mix(s, l, k as f32);
            for row in m.rows() {
                let sum: f64 = row.iter().map(|&v| v as f64).sum();
                self.stats.max_row_sum_error = self.stats.max_row_sum_error.max((sum - 1.0).abs());
            }
            out.push(m);
        }
        self.stats.source_weights.insert(self.u, 1.0 - k);
        self.stats.attention_overrides += 1;
        Ok(Some(out))
    }
}

/// Injected noise prediction of a styled branch at step `u`.
#[allow(clippy::too_many_arguments)]
pub fn guided_eps(
    base: &UNetModel,
    adapter: Option<&LoraAdapter>,
    trace: &InjectionTrace,
    prompt: &PromptEmbedding,
    plan: &SamplingPlan,
    cfg: &InjectionConfig,
    u: usize,
    z: &LatentTensor,
    stats: &mut InjectionStats,
) -> Result<LatentTensor> {
    let (t, _) = plan.step(u);
    let mc = base.config();
    let run = |c: &PromptEmbedding, stats: &mut InjectionStats| {
        let mut hooks = InjectHooks {
            u,
            num_steps: plan.num_steps(),
            heads: mc.heads,
            head_dim: mc.head_dim,
            trace,
            cfg,
            stats,
        };
        predict_eps(base, adapter, z, t, c, &mut hooks)
    };
    let eps = run(prompt, stats)?;
    if cfg.guidance_scale == 1.0 {
        return Ok(eps);
    }
    let uncond = run(&base.null_prompt(), stats)?;
    let g = cfg.guidance_scale;
    let mixed = ndarray::Zip::from(uncond.data())
        .and(eps.data())
        .map_collect(|&u, &c| (u as f64 + g * (c as f64 - u as f64)) as f32);
    LatentTensor::from_array(mixed)
}

/// One injected denoising step of a styled branch from `z` at step `u`.
#[allow(clippy::too_many_arguments)]
pub fn guided_step(
    base: &UNetModel,
    adapter: Option<&LoraAdapter>,
    trace: &InjectionTrace,
    prompt: &PromptEmbedding,
    plan: &SamplingPlan,
    schedule: &NoiseSchedule,
    cfg: &InjectionConfig,
    u: usize,
    z: &LatentTensor,
    stats: &mut InjectionStats,
) -> Result<LatentTensor> {
    let eps = guided_eps(base, adapter, trace, prompt, plan, cfg, u, z, stats)?;
    let (t, t_prev) = plan.step(u);
    ddim_denoise_step(z, &eps, t, t_prev, schedule)
}

/// Styled sampling from the trace's initial noise with feature and attention
/// injection. Returns the final latent and what was injected.
pub fn guided_denoise(
    adapted: &AdaptedModel<'_>,
    trace: &InjectionTrace,
    prompt: &PromptEmbedding,
    plan: &SamplingPlan,
    schedule: &NoiseSchedule,
    cfg: &InjectionConfig,
) -> Result<(LatentTensor, InjectionStats)> {
    guided_denoise_with(adapted.base, Some(adapted.adapter), trace, prompt, plan, schedule, cfg)
}

/// [`guided_denoise`] with an optional adapter.
pub fn guided_denoise_with(
    base: &UNetModel,
    adapter: Option<&LoraAdapter>,
    trace: &InjectionTrace,
    prompt: &PromptEmbedding,
    plan: &SamplingPlan,
    schedule: &NoiseSchedule,
    cfg: &InjectionConfig,
) -> Result<(LatentTensor, InjectionStats)> {
    trace.check_covers(plan, cfg)?;
    let mut stats = InjectionStats::default();
    let mut z = trace.initial_noise().clone();
    for u in 0..plan.num_steps() {
        z = guided_step(base, adapter, trace, prompt, plan, schedule, cfg, u, &z, &mut stats)?;
    }
    Ok((z, stats))
}
