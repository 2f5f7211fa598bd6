//! Adam/AdamW and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::nn::{Param, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self { lr, weight_decay: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self { weight_decay, ..Self::adam(lr) }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok { Ok(()) } else { Err(format!("invalid optimizer settings {self:?}")) }
    }
}

/// Adam with decoupled weight decay (AdamW when `weight_decay > 0`).
///
/// Moment buffers follow the visit order of the parameters passed to [`Adam::step`];
/// the same module must be stepped every time.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut dyn Params) {
        self.step_many(&mut [params]);
    }

    pub fn step_many(&mut self, params: &mut [&mut dyn Params]) {
        let n: usize = params.iter().map(|p| p.num_params()).sum();
        if self.m.len() != n {
            assert!(self.t == 0, "parameter set changed between optimizer steps");
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut off = 0;
        for group in params.iter_mut() {
            group.visit_mut(&mut |p: &mut Param| {
                let m = &mut self.m[off..off + p.len()];
                let v = &mut self.v[off..off + p.len()];
                for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m).zip(v) {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *w -= c.lr * c.weight_decay * *w;
                    *w -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                }
                off += p.len();
            });
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut [&mut dyn Params], max_norm: f64) -> f64 {
    let norm = params.iter().map(|p| p.grad_sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        params.iter_mut().for_each(|p| p.scale_grad(k));
    }
    norm
}
