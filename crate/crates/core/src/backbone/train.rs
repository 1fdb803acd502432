//! Base-model training: epsilon-prediction MSE on the procedural dataset.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::codec::encode;
use super::prompt::{tokenize, TokenId, NULL_TOKEN};
use super::unet::{ModelConfig, NoHooks, UNetModel};
use crate::autograd::Tape;
use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{self, gaussian_vec};
use crate::schedule::NoiseSchedule;
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBaseConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Probability of replacing the prompt with the NULL prompt.
    #[serde(default = "default_null_prob")]
    pub null_prob: f64,
    pub seed: u64,
}

fn default_null_prob() -> f64 {
    0.1
}

impl TrainBaseConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidRange("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidRange("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.null_prob) {
            return Err(Error::InvalidRange("null_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the first `window` steps.
    pub fn initial_mean(&self, window: usize) -> f64 {
        window_mean(&self.losses[..window.min(self.losses.len())])
    }

    /// Mean loss over the last `window` steps.
    pub fn final_mean(&self, window: usize) -> f64 {
        let n = self.losses.len();
        window_mean(&self.losses[n - window.min(n)..])
    }
}

fn window_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct Item {
    latent: usize,
    t: usize,
    eps: Vec<f32>,
    tokens: Vec<TokenId>,
}

/// Loss and per-parameter gradients for one noised sample.
pub(crate) fn sample_gradients(
    model: &UNetModel,
    z0: &LatentTensor,
    t: usize,
    eps: &[f32],
    tokens: &[TokenId],
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<Option<Array2<f32>>>)> {
    let shape = model.config().latent;
    let eps = LatentTensor::from_vec(shape, eps.to_vec())?;
    let z_t = crate::schedule::add_noise(z0, t, &eps, schedule)?;
    let mut tape = Tape::new();
    let mut bind = model.new_binder(true);
    let z = tape.constant(z_t.tokens().to_owned());
    let text = model.embed_tape(&mut tape, &mut bind, tokens)?;
    let pred = model.forward_tape(&mut tape, &mut bind, z, t, text, None, &mut NoHooks)?;
    let target = tape.constant(eps.tokens().to_owned());
    let loss = tape.mse(pred, target);
    let mut grads = tape.backward(loss);
    let mut out: Vec<Option<Array2<f32>>> = vec![None; model.params().len()];
    for (id, var) in bind.bound() {
        out[id.0] = grads.take(var);
    }
    Ok((tape.value(loss)[[0, 0]] as f64, out))
}

/// Trains a fresh model from `cfg.seed`. `steps = 0` returns the
/// initialization unchanged.
pub fn train_base(
    cfg: &TrainBaseConfig,
    schedule: &NoiseSchedule,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(UNetModel, TrainReport)> {
    cfg.validate()?;
    let mut model = UNetModel::<f32>::init(cfg.model.clone(), cfg.seed)?;
    if cfg.model.latent != super::codec::LATENT_SHAPE {
        return Err(Error::ConfigMismatch(
            "base training runs on image latents; use the toy latent shape".into(),
        ));
    }
    let samples = cfg.dataset.generate()?;
    let latents: Vec<LatentTensor> = samples.iter().map(|s| encode(&s.image)).collect();
    let prompts: Vec<Vec<TokenId>> = samples
        .iter()
        .map(|s| tokenize(s.shape.word()))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::with_lr(cfg.lr)
        },
        model.params().iter().map(|(_, _, v)| v.dim()),
    );
    let mut rng = rng::stream(cfg.seed, "train_base/batches");
    let n = model.config().latent.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let items: Vec<Item> = (0..cfg.batch_size)
            .map(|_| {
                let latent = rng.random_range(0..latents.len());
                let t = rng.random_range(0..schedule.t_train());
                let eps = gaussian_vec(&mut rng, n, 1.0);
                let tokens = if rng.random_bool(cfg.null_prob) {
                    vec![NULL_TOKEN]
                } else {
                    prompts[latent].clone()
                };
                Item {
                    latent,
                    t,
                    eps,
                    tokens,
                }
            })
            .collect();
        let results: Vec<Result<(f64, Vec<Option<Array2<f32>>>)>> = items
            .par_iter()
            .map(|it| sample_gradients(&model, &latents[it.latent], it.t, &it.eps, &it.tokens, schedule))
            .collect();
        let mut total = 0.0;
        let mut sum: Vec<Option<Array2<f32>>> = vec![None; model.params().len()];
        for r in results {
            let (loss, grads) = r?;
            total += loss;
            for (slot, g) in sum.iter_mut().zip(grads) {
                match (slot.as_mut(), g) {
                    (Some(s), Some(g)) => *s += &g,
                    (None, Some(g)) => *slot = Some(g),
                    _ => {}
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
        opt.step(&mut model.params_mut().values_mut(), &sum);
        losses.push(loss);
        on_step(step, loss);
    }
    Ok((model, TrainReport { losses }))
}
