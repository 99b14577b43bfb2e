//! Rectified Adam and exponential moving averages over flat parameter vectors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RAdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl RAdamSettings {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// RAdam with bias-corrected first moment and variance rectification; falls
/// back to plain momentum SGD while the variance estimate is unreliable.
#[derive(Debug, Clone)]
pub struct RAdam {
    settings: RAdamSettings,
    m: Vec<f32>,
    v: Vec<f32>,
    step: u64,
}

impl RAdam {
    pub fn new(settings: RAdamSettings, n: usize) -> Self {
        Self {
            settings,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let s = self.settings;
        let t = self.step as f64;
        let (b1, b2) = (s.beta1, s.beta2);
        let bias1 = 1.0 - b1.powf(t);
        let b2t = b2.powf(t);
        let bias2 = 1.0 - b2t;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2t / bias2;
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        for (m, &g) in self.m.iter_mut().zip(grads) {
            *m = b1f * *m + (1.0 - b1f) * g;
        }
        for (v, &g) in self.v.iter_mut().zip(grads) {
            *v = b2f * *v + (1.0 - b2f) * g * g;
        }
        if rho_t > 5.0 {
            let r = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt();
            let step_size = (s.lr * r / bias1) as f32;
            let bias2_sqrt = bias2.sqrt() as f32;
            let eps = s.eps as f32;
            for ((p, &m), &v) in params.iter_mut().zip(&self.m).zip(&self.v) {
                *p -= step_size * m * bias2_sqrt / (v.sqrt() + eps);
            }
        } else {
            let step_size = (s.lr / bias1) as f32;
            for (p, &m) in params.iter_mut().zip(&self.m) {
                *p -= step_size * m;
            }
        }
    }
}

/// `ema ← decay·ema + (1 − decay)·θ`, elementwise in `f32`.
pub fn ema_update(ema: &mut [f32], params: &[f32], decay: f64) {
    let d = decay as f32;
    let w = 1.0 - d;
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = d * *e + w * p;
    }
}
