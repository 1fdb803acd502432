//! Noise schedule and deterministic DDIM stepping.
//!
//! Step-index convention: a sampling run performs `S` denoising steps indexed
//! `u = 0..S`. Step `u` moves from `timesteps[u]` to `timesteps[u + 1]`, and the
//! last step moves to the clean sentinel (`None`, where the cumulative alpha is
//! exactly one).

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_SAMPLING_STEPS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    t_train: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `t_train` steps.
    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_train < 2 {
            return Err(Error::InvalidRange(format!("t_train must be >= 2, got {t_train}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let span = beta_end - beta_start;
        let denom = (t_train - 1) as f64;
        let betas: Vec<f64> = (0..t_train)
            .map(|i| beta_start + span * i as f64 / denom)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_train);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            t_train,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn t_train(&self) -> usize {
        self.t_train
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Cumulative alpha at `t`; `None` is the clean sentinel with value 1.
    pub fn alpha_bar(&self, t: Option<usize>) -> Result<f64> {
        match t {
            None => Ok(1.0),
            Some(t) if t < self.t_train => Ok(self.alpha_bars[t]),
            Some(t) => Err(Error::InvalidRange(format!(
                "timestep {t} outside [0, {})",
                self.t_train
            ))),
        }
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

pub fn make_schedule(t_train: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(t_train, beta_start, beta_end)
}

/// Evenly spaced, strictly decreasing timesteps: `floor(k * t_train / S)` for
/// `k = S-1 .. 0`.
pub fn subsample_timesteps(t_train: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps < 2 || num_steps > t_train {
        return Err(Error::InvalidRange(format!(
            "sampling steps must lie in [2, {t_train}], got {num_steps}"
        )));
    }
    Ok((0..num_steps)
        .rev()
        .map(|k| k * t_train / num_steps)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub timesteps: Vec<usize>,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn new(schedule: &NoiseSchedule, num_steps: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            timesteps: subsample_timesteps(schedule.t_train(), num_steps)?,
            seed,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.timesteps.len()
    }

    /// `(t, t_prev)` for denoising step `u`.
    pub fn step(&self, u: usize) -> (usize, Option<usize>) {
        (self.timesteps[u], self.timesteps.get(u + 1).copied())
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.timesteps.len() < 2 {
            return Err(Error::InvalidRange("sampling plan needs at least 2 steps".into()));
        }
        if self.timesteps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidRange("timesteps must be strictly decreasing".into()));
        }
        if self.timesteps[0] >= schedule.t_train() {
            return Err(Error::InvalidRange(format!(
                "timestep {} outside [0, {})",
                self.timesteps[0],
                schedule.t_train()
            )));
        }
        Ok(())
    }
}

/// `sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps`.
pub fn add_noise(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    z0.check_same_shape(eps)?;
    let ab = schedule.alpha_bar(Some(t))?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let out = Zip::from(z0.data())
        .and(eps.data())
        .map_collect(|&z, &e| (a * z as f64 + b * e as f64) as f32);
    LatentTensor::from_array(out)
}

/// Deterministic DDIM update from `t` to `t_prev` (eta = 0).
pub fn ddim_denoise_step(
    z_t: &LatentTensor,
    eps_hat: &LatentTensor,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    z_t.check_same_shape(eps_hat)?;
    if t_prev == Some(t) {
        return Ok(z_t.clone());
    }
    if let Some(tp) = t_prev {
        if tp > t {
            return Err(Error::InvalidRange(format!(
                "denoising must move toward the clean end ({t} -> {tp})"
            )));
        }
    }
    let ab_t = positive(schedule.alpha_bar(Some(t))?)?;
    let ab_prev = positive(schedule.alpha_bar(t_prev)?)?;
    transfer(z_t, eps_hat, ab_t, ab_prev)
}

/// Exact algebraic inverse of [`ddim_denoise_step`] for a fixed `eps_hat`.
pub fn ddim_invert_step(
    z_prev: &LatentTensor,
    eps_hat: &LatentTensor,
    t_prev: Option<usize>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    z_prev.check_same_shape(eps_hat)?;
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::InvalidRange(format!(
                "inversion must move toward the noisy end ({tp} -> {t})"
            )));
        }
    }
    let ab_prev = positive(schedule.alpha_bar(t_prev)?)?;
    let ab_t = positive(schedule.alpha_bar(Some(t))?)?;
    transfer(z_prev, eps_hat, ab_prev, ab_t)
}

fn positive(ab: f64) -> Result<f64> {
    if ab > 0.0 && ab.is_finite() {
        Ok(ab)
    } else {
        Err(Error::Numeric(format!("cumulative alpha must be positive, got {ab}")))
    }
}

// Re-expresses a latent at noise level `ab_from` as one at `ab_to`, holding the
// predicted noise fixed.
fn transfer(z: &LatentTensor, eps: &LatentTensor, ab_from: f64, ab_to: f64) -> Result<LatentTensor> {
    let (sf, nf) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (st, nt) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    let out = Zip::from(z.data()).and(eps.data()).map_collect(|&z, &e| {
        let (z, e) = (z as f64, e as f64);
        let x0 = (z - nf * e) / sf;
        (st * x0 + nt * e) as f32
    });
    LatentTensor::from_array(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LatentShape;
    use proptest::prelude::*;

    // Arbitrary-precision (mpmath, 50 digits) product of (1 - beta_i) for the
    // default linear schedule.
    const ALPHA_BAR_999_ORACLE: f64 = 4.035_829_765_375_683_3e-5;

    fn latent(values: Vec<f32>) -> LatentTensor {
        let n = values.len();
        LatentTensor::from_vec(LatentShape::new(1, 1, n), values).unwrap()
    }

    #[test]
    fn default_schedule_first_and_last() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bars()[0], 1.0 - 1e-4);
        let rel = (s.alpha_bars()[999] - ALPHA_BAR_999_ORACLE).abs() / ALPHA_BAR_999_ORACLE;
        assert!(rel < 1e-12, "relative error {rel}");
        assert!(s.alpha_bars()[999] < 0.05);
    }

    #[test]
    fn two_step_schedule() {
        let s = make_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::default();
        assert!(s.betas().windows(2).all(|w| w[0] <= w[1]));
        assert!(s.betas().iter().all(|&b| b > 0.0));
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
        for i in 1..s.t_train() {
            assert_eq!(s.alpha_bars()[i], s.alpha_bars()[i - 1] * s.alphas()[i]);
        }
    }

    #[test]
    fn subsample_examples() {
        let ts = subsample_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 980);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 20));
        assert_eq!(subsample_timesteps(10, 10).unwrap(), (0..10).rev().collect::<Vec<_>>());
        let ts = subsample_timesteps(1000, 3).unwrap();
        let gaps: Vec<usize> = ts.windows(2).map(|w| w[0] - w[1]).collect();
        assert!(gaps.iter().max().unwrap() - gaps.iter().min().unwrap() <= 1);
        assert!(subsample_timesteps(10, 1).is_err());
        assert!(subsample_timesteps(10, 11).is_err());
    }

    #[test]
    fn add_noise_hand_evaluation() {
        let s = make_schedule(2, 0.5, 0.5).unwrap();
        let out = add_noise(&latent(vec![1.0]), 1, &latent(vec![1.0]), &s).unwrap();
        let expected = (0.5f64 + 0.75f64.sqrt()) as f32;
        assert_eq!(out.as_slice(), &[expected]);
    }

    #[test]
    fn add_noise_zero_eps_scales() {
        let s = NoiseSchedule::default();
        let z0 = latent(vec![0.5, -1.0, 2.0]);
        let out = add_noise(&z0, 10, &latent(vec![0.0; 3]), &s).unwrap();
        let a = s.alpha_bars()[10].sqrt();
        for (o, z) in out.as_slice().iter().zip(z0.as_slice()) {
            assert_eq!(*o, (a * *z as f64) as f32);
        }
        // alpha_bar -> 1 limit
        let near = make_schedule(2, 1e-12, 1e-12).unwrap();
        let out = add_noise(&z0, 0, &latent(vec![0.3; 3]), &near).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-5);
    }

    #[test]
    fn add_noise_shape_mismatch() {
        let s = NoiseSchedule::default();
        assert!(matches!(
            add_noise(&latent(vec![1.0]), 0, &latent(vec![1.0, 2.0]), &s),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn denoise_identity_and_zero() {
        let s = NoiseSchedule::default();
        let z = latent(vec![0.25, -0.5]);
        let e = latent(vec![1.0, 0.1]);
        assert!(ddim_denoise_step(&z, &e, 500, Some(500), &s).unwrap().bit_eq(&z));
        let zero = latent(vec![0.0, 0.0]);
        let out = ddim_denoise_step(&zero, &zero, 500, Some(480), &s).unwrap();
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invert_with_zero_eps_rescales() {
        let s = NoiseSchedule::default();
        let z = latent(vec![0.25, -0.5]);
        let zero = latent(vec![0.0, 0.0]);
        let out = ddim_invert_step(&z, &zero, Some(100), 200, &s).unwrap();
        let r = (s.alpha_bars()[200] / s.alpha_bars()[100]).sqrt();
        for (o, v) in out.as_slice().iter().zip(z.as_slice()) {
            assert!((*o as f64 - r * *v as f64).abs() < 1e-7);
        }
    }

    #[test]
    fn direction_errors() {
        let s = NoiseSchedule::default();
        let z = latent(vec![0.0]);
        assert!(ddim_denoise_step(&z, &z, 10, Some(20), &s).is_err());
        assert!(ddim_invert_step(&z, &z, Some(20), 10, &s).is_err());
        assert!(ddim_denoise_step(&z, &z, 1000, None, &s).is_err());
    }

    fn small_latent() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-1.5f32..1.5, 12)
    }

    proptest! {
        // The f32 rounding of z_t is amplified by 1/sqrt(ab_t) (~157 at t = 999),
        // so the 1e-5 bound holds while |z_t| < 2, i.e. codec-range latents with
        // moderate noise.
        #[test]
        fn exact_eps_recovers_clean_latent(z0 in prop::collection::vec(-1.0f32..1.0, 12), eps in small_latent(), t in 0usize..1000) {
            let s = NoiseSchedule::default();
            let (z0, eps) = (latent(z0), latent(eps));
            let zt = add_noise(&z0, t, &eps, &s).unwrap();
            let back = ddim_denoise_step(&zt, &eps, t, None, &s).unwrap();
            prop_assert!(back.max_abs_diff(&z0) <= 1e-5);
        }

        #[test]
        fn invert_then_denoise_round_trips(z in small_latent(), eps in small_latent(), u in 0usize..49) {
            let s = NoiseSchedule::default();
            let plan = SamplingPlan::new(&s, 50, 0).unwrap();
            let (t, t_prev) = plan.step(u);
            let (z, eps) = (latent(z), latent(eps));
            let up = ddim_invert_step(&z, &eps, t_prev, t, &s).unwrap();
            let down = ddim_denoise_step(&up, &eps, t, t_prev, &s).unwrap();
            prop_assert!(down.max_abs_diff(&z) <= 1e-6);
        }
    }
}
