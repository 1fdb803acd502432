//! Low-rank adapters on the Q/K/V projections of every attention block.
//!
//! An adapted projection computes `x W^T + (scale / rank) (x A^T) B^T`, i.e.
//! the effective weight is `W + (scale / rank) B A`. `B` starts at zero so a
//! fresh adapter leaves the model unchanged.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::codec::encode;
use crate::backbone::prompt::{validate_tokens, PromptEmbedding, TokenId};
use crate::backbone::unet::{BlockId, ForwardHooks, LoraVars, Projection, UNetModel};
use crate::error::{Error, Result};
use crate::image::ToyImage;
use crate::optim::{AdamW, AdamWConfig};
use crate::persist;
use crate::rng::{self, gaussian_vec};
use crate::schedule::{add_noise, NoiseSchedule};
use crate::tensor::{LatentTensor, Real};

pub const ADAPTER_KIND: &str = "adapter";
pub const ADAPTED_PROJECTIONS: [Projection; 3] = [Projection::Q, Projection::K, Projection::V];
pub const DEFAULT_RANK: usize = 16;
const INIT_STD: f64 = 0.01;

/// `A` is `rank x d_in`, `B` is `d_out x rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraEntry<F> {
    pub block: BlockId,
    pub projection: Projection,
    pub a: Array2<F>,
    pub b: Array2<F>,
}

impl<F: Real> LoraEntry<F> {
    fn cast<G: Real>(&self) -> LoraEntry<G> {
        LoraEntry {
            block: self.block,
            projection: self.projection,
            a: self.a.mapv(|x| G::from_f64c(x.to_f64c())),
            b: self.b.mapv(|x| G::from_f64c(x.to_f64c())),
        }
    }
}

/// How an adapter was produced. Stored with the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraMeta {
    pub rank: usize,
    pub scale: f64,
    pub style_token: String,
    pub prompt: Vec<String>,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub source_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub meta: LoraMeta,
    entries: Vec<LoraEntry<f32>>,
}

impl LoraAdapter {
    /// Fresh adapter: `A ~ N(0, 0.01^2)`, `B = 0`.
    pub fn init(model: &UNetModel, rank: usize, scale: f64, style_token: TokenId, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidRange("LoRA rank must be at least 1".into()));
        }
        if !scale.is_finite() {
            return Err(Error::InvalidRange("LoRA scale must be finite".into()));
        }
        let mut rng = rng::stream(seed, "lora/init");
        let mut entries = Vec::new();
        for block in BlockId::all() {
            for projection in ADAPTED_PROJECTIONS {
                let (d_in, d_out) = model.projection_dims(block, projection)?;
                if rank > d_in.min(d_out) {
                    return Err(Error::RankTooLarge { rank, d_in, d_out });
                }
                let a = Array2::from_shape_vec((rank, d_in), gaussian_vec(&mut rng, rank * d_in, INIT_STD))
                    .expect("shape");
                entries.push(LoraEntry {
                    block,
                    projection,
                    a,
                    b: Array2::zeros((d_out, rank)),
                });
            }
        }
        Ok(Self {
            meta: LoraMeta {
                rank,
                scale,
                style_token: style_token.word().to_string(),
                prompt: vec![style_token.word().to_string()],
                steps: 0,
                lr: 0.0,
                seed,
                optimizer: AdamWConfig::with_lr(0.0),
                source_sha256: None,
            },
            entries,
        })
    }

    pub fn rank(&self) -> usize {
        self.meta.rank
    }

    /// The factor applied to `B A`: `scale / rank`.
    pub fn multiplier(&self) -> f64 {
        self.meta.scale / self.meta.rank as f64
    }

    pub fn style_token(&self) -> Result<TokenId> {
        TokenId::lookup(&self.meta.style_token)
    }

    pub fn entries(&self) -> &[LoraEntry<f32>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [LoraEntry<f32>] {
        &mut self.entries
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.a.len() + e.b.len()).sum()
    }

    /// Errors unless every entry matches the model's projection shapes.
    pub fn check_compatible<F: Real>(&self, model: &UNetModel<F>) -> Result<()> {
        let expected = BlockId::all().len() * ADAPTED_PROJECTIONS.len();
        if self.entries.len() != expected {
            return Err(Error::shape(expected, self.entries.len()));
        }
        for e in &self.entries {
            let (d_in, d_out) = model.projection_dims(e.block, e.projection)?;
            let want = ((self.rank(), d_in), (d_out, self.rank()));
            if (e.a.dim(), e.b.dim()) != want {
                return Err(Error::shape(
                    format!("{}.{} {want:?}", e.block, e.projection.name()),
                    (e.a.dim(), e.b.dim()),
                ));
            }
        }
        Ok(())
    }

    /// Places the factors on a tape.
    pub fn bind<F: Real>(&self, tape: &mut Tape<F>, trainable: bool) -> LoraVars<F> {
        bind_entries(tape, &self.cast_entries::<F>(), F::from_f64c(self.multiplier()), trainable)
    }

    /// Base weights with `W + (scale / rank) B A` folded in.
    pub fn materialize(&self, base: &UNetModel) -> Result<UNetModel> {
        self.check_compatible(base)?;
        let mut model = base.clone();
        let mult = self.multiplier() as f32;
        for e in &self.entries {
            let id = base.projection_param(e.block, e.projection)?;
            *model.params_mut().get_mut(id) += &(e.b.dot(&e.a) * mult);
        }
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let names: Vec<(String, String)> = self.entries.iter().map(tensor_names).collect();
        let mut tensors = Vec::with_capacity(2 * self.entries.len());
        for (e, (na, nb)) in self.entries.iter().zip(&names) {
            tensors.push((na.clone(), &e.a));
            tensors.push((nb.clone(), &e.b));
        }
        persist::save(dir, ADAPTER_KIND, &self.meta, &tensors)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, tensors) = persist::load::<LoraMeta>(dir, ADAPTER_KIND)?;
        let corrupt = |reason: String| Error::CorruptFile {
            path: dir.to_path_buf(),
            reason,
        };
        if tensors.len() % 2 != 0 {
            return Err(corrupt("adapter tensors must come in A/B pairs".into()));
        }
        let mut entries = Vec::with_capacity(tensors.len() / 2);
        let mut it = tensors.into_iter();
        while let (Some((na, a)), Some((nb, b))) = (it.next(), it.next()) {
            let (block, projection) = parse_tensor_name(&na, "lora_a").map_err(|_| corrupt(format!("bad tensor name `{na}`")))?;
            if parse_tensor_name(&nb, "lora_b").ok() != Some((block, projection)) {
                return Err(corrupt(format!("`{nb}` does not pair with `{na}`")));
            }
            if !ADAPTED_PROJECTIONS.contains(&projection) {
                return Err(corrupt(format!("adapters only cover Q/K/V, found `{na}`")));
            }
            entries.push(LoraEntry {
                block,
                projection,
                a,
                b,
            });
        }
        TokenId::lookup(&manifest.metadata.style_token)?;
        Ok(Self {
            meta: manifest.metadata,
            entries,
        })
    }

    /// Loads and checks shapes against `model`.
    pub fn load_for(dir: &Path, model: &UNetModel) -> Result<Self> {
        let adapter = Self::load(dir)?;
        adapter.check_compatible(model)?;
        Ok(adapter)
    }

    /// The same factors in another precision.
    pub fn cast_entries<F: Real>(&self) -> Vec<LoraEntry<F>> {
        self.entries.iter().map(|e| e.cast()).collect()
    }
}

pub fn bind_entries<F: Real>(
    tape: &mut Tape<F>,
    entries: &[LoraEntry<F>],
    multiplier: F,
    trainable: bool,
) -> LoraVars<F> {
    let mut vars = LoraVars {
        multiplier,
        entries: Default::default(),
    };
    for e in entries {
        let a = tape.leaf(e.a.clone(), trainable);
        let b = tape.leaf(e.b.clone(), trainable);
        vars.entries.insert((e.block, e.projection), (a, b));
    }
    vars
}

fn tensor_names(e: &LoraEntry<f32>) -> (String, String) {
    let base = format!("{}.{}", e.block, e.projection.name());
    (format!("{base}.lora_a"), format!("{base}.lora_b"))
}

fn parse_tensor_name(name: &str, suffix: &str) -> Result<(BlockId, Projection)> {
    let bad = || Error::ConfigMismatch(format!("bad adapter tensor `{name}`"));
    let rest = name.strip_suffix(suffix).and_then(|r| r.strip_suffix('.')).ok_or_else(bad)?;
    let (block, proj) = rest.rsplit_once('.').ok_or_else(bad)?;
    let projection = ADAPTED_PROJECTIONS
        .into_iter()
        .chain([Projection::Out])
        .find(|p| p.name() == proj)
        .ok_or_else(bad)?;
    Ok((BlockId::parse(block)?, projection))
}

/// A base model with an adapter attached. The base is never mutated.
#[derive(Clone, Copy)]
pub struct AdaptedModel<'a> {
    pub base: &'a UNetModel,
    pub adapter: &'a LoraAdapter,
}

impl<'a> AdaptedModel<'a> {
    pub fn new(base: &'a UNetModel, adapter: &'a LoraAdapter) -> Result<Self> {
        adapter.check_compatible(base)?;
        Ok(Self { base, adapter })
    }

    pub fn forward(
        &self,
        z_t: &LatentTensor,
        t: usize,
        c: &PromptEmbedding,
        hooks: &mut dyn ForwardHooks<f32>,
    ) -> Result<LatentTensor> {
        let adapter = self.adapter;
        let bind = move |tape: &mut Tape<f32>| adapter.bind(tape, false);
        self.base.predict(z_t, t, c, Some(&bind), hooks)
    }
}

/// One term of the adapter objective: `|eps - eps_hat(sqrt(ab) z0 + sqrt(1-ab) eps, t, c)|^2`.
#[derive(Debug, Clone)]
pub struct LoraSample {
    pub t: usize,
    pub eps: LatentTensor,
}

/// Loss and `(dA, dB)` per entry, in any precision.
pub fn lora_loss_and_grads<F: Real>(
    model: &UNetModel<F>,
    entries: &[LoraEntry<F>],
    multiplier: F,
    z0: &LatentTensor,
    tokens: &[TokenId],
    sample: &LoraSample,
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<(Array2<F>, Array2<F>)>)> {
    let z_t = add_noise(z0, sample.t, &sample.eps, schedule)?;
    let mut tape = Tape::new();
    let mut bind = model.new_binder(false);
    let vars = bind_entries(&mut tape, entries, multiplier, true);
    let z = tape.constant(z_t.tokens_as::<F>());
    let text = model.embed_tape(&mut tape, &mut bind, tokens)?;
    let pred = model.forward_tape(&mut tape, &mut bind, z, sample.t, text, Some(&vars), &mut crate::backbone::NoHooks)?;
    let target = tape.constant(sample.eps.tokens_as::<F>());
    let loss = tape.mse(pred, target);
    let loss_value = tape.value(loss)[[0, 0]].to_f64c();
    let mut grads = tape.backward(loss);
    let out = entries
        .iter()
        .map(|e| {
            let (a, b) = vars.entries[&(e.block, e.projection)];
            let ga = grads.take(a).unwrap_or_else(|| Array2::zeros(e.a.dim()));
            let gb = grads.take(b).unwrap_or_else(|| Array2::zeros(e.b.dim()));
            (ga, gb)
        })
        .collect();
    Ok((loss_value, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraTrainConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Noised copies of the style latent per iteration.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
}

fn default_rank() -> usize {
    DEFAULT_RANK
}
fn default_scale() -> f64 {
    1.0
}
fn default_steps() -> usize {
    200
}
fn default_lr() -> f64 {
    2e-4
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_batch() -> usize {
    1
}

impl LoraTrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            rank: default_rank(),
            scale: default_scale(),
            steps: default_steps(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidRange("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidRange("batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidRange("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraReport {
    pub losses: Vec<f64>,
}

/// Fits an adapter to one style image. Only the adapter factors change.
pub fn train_lora(
    base: &UNetModel,
    style_image: &ToyImage,
    tokens: &[TokenId],
    cfg: &LoraTrainConfig,
    schedule: &NoiseSchedule,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(LoraAdapter, LoraReport)> {
    cfg.validate()?;
    validate_tokens(tokens)?;
    let style_token = tokens
        .iter()
        .copied()
        .find(|t| t.is_style_trigger())
        .ok_or_else(|| Error::ConfigMismatch("LoRA prompt must contain a style-trigger token".into()))?;
    let mut adapter = LoraAdapter::init(base, cfg.rank, cfg.scale, style_token, cfg.seed)?;
    let opt_cfg = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::with_lr(cfg.lr)
    };
    adapter.meta.prompt = tokens.iter().map(|t| t.word().to_string()).collect();
    adapter.meta.steps = cfg.steps;
    adapter.meta.lr = cfg.lr;
    adapter.meta.optimizer = opt_cfg;
    adapter.meta.source_sha256 = Some(style_image.sha256());

    let z0 = encode(style_image);
    let shapes = adapter.entries.iter().flat_map(|e| [e.a.dim(), e.b.dim()]);
    let mut opt = AdamW::new(opt_cfg, shapes);
    let mut rng = rng::stream(cfg.seed, "lora/samples");
    let mult = adapter.multiplier() as f32;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let samples: Vec<LoraSample> = (0..cfg.batch_size)
            .map(|_| {
                let t = rng.random_range(0..schedule.t_train());
                let eps = gaussian_vec(&mut rng, z0.shape().len(), 1.0);
                LatentTensor::from_vec(z0.shape(), eps).map(|eps| LoraSample { t, eps })
            })
            .collect::<Result<_>>()?;
        let results: Vec<_> = samples
            .par_iter()
            .map(|s| lora_loss_and_grads(base, &adapter.entries, mult, &z0, tokens, s, schedule))
            .collect();
        let mut total = 0.0;
        let mut sum: Vec<Option<Array2<f32>>> = Vec::new();
        for r in results {
            let (loss, grads) = r?;
            total += loss;
            let flat = grads.into_iter().flat_map(|(a, b)| [a, b]);
            if sum.is_empty() {
                sum = flat.map(Some).collect();
            } else {
                for (s, g) in sum.iter_mut().zip(flat) {
                    *s.as_mut().expect("filled") += &g;
                }
            }
        }
        let loss = total / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let inv = 1.0 / cfg.batch_size as f32;
        for g in sum.iter_mut().flatten() {
            g.mapv_inplace(|v| v * inv);
        }
        let mut params: Vec<&mut Array2<f32>> = adapter
            .entries
            .iter_mut()
            .flat_map(|e| [&mut e.a, &mut e.b])
            .collect();
        opt.step(&mut params, &sum);
        losses.push(loss);
        on_step(step, loss);
    }
    Ok((adapter, LoraReport { losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ModelConfig, NoHooks};

    fn style() -> TokenId {
        TokenId::lookup("<stripe>").unwrap()
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let model = UNetModel::<f32>::init(ModelConfig::miniature(), 3).unwrap();
        let adapter = LoraAdapter::init(&model, 4, 1.0, style(), 5).unwrap();
        let adapted = AdaptedModel::new(&model, &adapter).unwrap();
        let mut rng = rng::stream(1, "test");
        let shape = model.config().latent;
        let z = LatentTensor::from_vec(shape, gaussian_vec(&mut rng, shape.len(), 1.0)).unwrap();
        let c = model.embed_prompt(&[style()]).unwrap();
        let base = model.forward(&z, 400, &c, &mut NoHooks).unwrap();
        let ad = adapted.forward(&z, 400, &c, &mut NoHooks).unwrap();
        assert!(base.bit_eq(&ad));
    }

    #[test]
    fn rank_bounds_and_counts() {
        let model = UNetModel::<f32>::init(ModelConfig::toy(), 3).unwrap();
        let adapter = LoraAdapter::init(&model, 16, 1.0, style(), 5).unwrap();
        let e = adapter
            .entries()
            .iter()
            .find(|e| e.block.to_string() == "dec1.self" && e.projection == Projection::Q)
            .unwrap();
        assert_eq!(e.a.len() + e.b.len(), 16 * 64 + 64 * 16);
        assert!(matches!(
            LoraAdapter::init(&model, 33, 1.0, style(), 5),
            Err(Error::RankTooLarge { .. })
        ));
        let again = LoraAdapter::init(&model, 16, 1.0, style(), 5).unwrap();
        assert_eq!(adapter, again);
    }

    #[test]
    fn materialized_weights_match_factored_forward() {
        let model = UNetModel::<f32>::init(ModelConfig::miniature(), 3).unwrap();
        let mut adapter = LoraAdapter::init(&model, 4, 1.0, style(), 5).unwrap();
        let mut rng = rng::stream(2, "b");
        for e in adapter.entries_mut() {
            let n = e.b.len();
            e.b = Array2::from_shape_vec(e.b.dim(), gaussian_vec(&mut rng, n, 0.5)).unwrap();
        }
        let shape = model.config().latent;
        let z = LatentTensor::from_vec(shape, gaussian_vec(&mut rng, shape.len(), 1.0)).unwrap();
        let c = model.embed_prompt(&[style()]).unwrap();
        let factored = AdaptedModel::new(&model, &adapter)
            .unwrap()
            .forward(&z, 100, &c, &mut NoHooks)
            .unwrap();
        let merged = adapter.materialize(&model).unwrap().forward(&z, 100, &c, &mut NoHooks).unwrap();
        let base = model.forward(&z, 100, &c, &mut NoHooks).unwrap();
        assert!(factored.max_abs_diff(&merged) <= 1e-5);
        assert!(factored.max_abs_diff(&base) > 1e-4);
    }

    #[test]
    fn save_load_roundtrip_and_shape_check() {
        let model = UNetModel::<f32>::init(ModelConfig::miniature(), 3).unwrap();
        let adapter = LoraAdapter::init(&model, 2, 1.0, style(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        adapter.save(dir.path()).unwrap();
        let loaded = LoraAdapter::load_for(dir.path(), &model).unwrap();
        assert_eq!(adapter, loaded);
        let other = UNetModel::<f32>::init(
            ModelConfig {
                channels: [12, 12, 12],
                ..ModelConfig::miniature()
            },
            3,
        )
        .unwrap();
        assert!(matches!(
            LoraAdapter::load_for(dir.path(), &other),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
