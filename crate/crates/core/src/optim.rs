use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u32,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|s| (Array2::zeros(s), Array2::zeros(s)))
            .unzip();
        Self { cfg, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Updates `params[i]` with `grads[i]`; `None` gradients leave the slot
    /// untouched apart from weight decay.
    pub fn step(&mut self, params: &mut [&mut Array2<f32>], grads: &[Option<Array2<f32>>]) {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = (1.0 - c.lr * c.weight_decay) as f32;
        for (i, p) in params.iter_mut().enumerate() {
            if decay != 1.0 {
                p.mapv_inplace(|x| x * decay);
            }
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(&mut **p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g as f64;
                    let mm = c.beta1 * *m as f64 + (1.0 - c.beta1) * g;
                    let vv = c.beta2 * *v as f64 + (1.0 - c.beta2) * g * g;
                    *m = mm as f32;
                    *v = vv as f32;
                    let update = (mm / bc1) / ((vv / bc2).sqrt() + c.eps);
                    *p -= (c.lr * update) as f32;
                });
        }
    }
}
