//! Consistency-model prior: preconditioned network `f_θ(x, t)`, noise grids,
//! consistency training and checkpoints.

mod checkpoint;
pub mod nn;
pub mod optim;
mod train;
pub mod unet;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use nn::{Act, Scalar};
pub use train::{
    batch_loss_fixed_target, consistency_targets, denoising_mse, evaluate_loss, normalization_scale, self_consistency_gap, train, training_tensors,
    LossRecord, LossTrace, TrainOptions, TrainingBatch,
};
pub use unet::{BackboneConfig, ParamEntry, UNet};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmConfig {
    pub sigma_data: f64,
    pub epsilon: f64,
    pub t_max: f64,
    pub rho_grid: f64,
    pub s0: usize,
    pub s1: usize,
    pub huber_c: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub ema_decay: f64,
    pub backbone: BackboneConfig,
}

impl CmConfig {
    /// Full-length training recipe with the larger backbone.
    pub fn full() -> Self {
        Self {
            sigma_data: 0.02228,
            epsilon: 0.002,
            t_max: 0.13,
            rho_grid: 7.0,
            s0: 10,
            s1: 640,
            huber_c: 0.0244,
            lr: 1e-4,
            batch: 64,
            steps: 50_000,
            ema_decay: 0.9999,
            backbone: BackboneConfig::full(),
        }
    }

    /// Short single-core run: small backbone, shorter schedule, faster EMA.
    pub fn desk() -> Self {
        Self {
            lr: 2e-4,
            batch: 16,
            steps: 5000,
            ema_decay: 0.999,
            backbone: BackboneConfig::desk(),
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.sigma_data,
            self.epsilon,
            self.t_max,
            self.rho_grid,
            self.huber_c,
            self.lr,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidConfig("cm scalars must be finite and positive".into()));
        }
        if self.epsilon >= self.t_max {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} must be below t_max {}",
                self.epsilon, self.t_max
            )));
        }
        if self.s0 < 2 || self.s0 > self.s1 {
            return Err(Error::InvalidConfig(format!(
                "discretization sizes need 2 <= s0 <= s1, got {} and {}",
                self.s0, self.s1
            )));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::InvalidConfig("batch and steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        Ok(())
    }

    pub fn c_skip(&self, t: f64) -> f64 {
        let s2 = self.sigma_data * self.sigma_data;
        let d = t - self.epsilon;
        s2 / (d * d + s2)
    }

    pub fn c_out(&self, t: f64) -> f64 {
        self.sigma_data * (t - self.epsilon) / (self.sigma_data * self.sigma_data + t * t).sqrt()
    }

    pub fn c_in(&self, t: f64) -> f64 {
        1.0 / (self.sigma_data * self.sigma_data + t * t).sqrt()
    }

    pub fn c_noise(&self, t: f64) -> f64 {
        250.0 * t.ln()
    }
}

/// Karras-spaced levels `t_1 = ε < … < t_k = T`; `k` is clamped to at least 2.
pub fn noise_grid(config: &CmConfig, k: usize) -> Vec<f64> {
    let k = k.max(2);
    let inv = 1.0 / config.rho_grid;
    let lo = config.epsilon.powf(inv);
    let hi = config.t_max.powf(inv);
    let mut grid: Vec<f64> = (0..k)
        .map(|i| (lo + i as f64 / (k - 1) as f64 * (hi - lo)).powf(config.rho_grid))
        .collect();
    grid[0] = config.epsilon;
    grid[k - 1] = config.t_max;
    grid
}

/// Doubling schedule from `s0` to `s1`: the step range is split into
/// `⌈log2(s1/s0)⌉ + 1` equal stages and the size doubles at each stage.
pub fn discretization_schedule(config: &CmConfig, step: usize, total_steps: usize) -> usize {
    let doublings = (config.s1 as f64 / config.s0 as f64).log2().ceil().max(0.0) as u32;
    let stage_len = (total_steps / (doublings as usize + 1)).max(1);
    let stage = (step / stage_len).min(doublings as usize) as u32;
    (config.s0.saturating_mul(1usize << stage)).min(config.s1)
}

/// Which parameter copy a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamSet {
    Online,
    Ema,
}

/// Network plus online and EMA weights and the data normalization constant.
#[derive(Clone)]
pub struct ConsistencyModel {
    config: CmConfig,
    net: UNet,
    online: Vec<f32>,
    ema: Vec<f32>,
    scale: f64,
}

impl std::fmt::Debug for ConsistencyModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConsistencyModel")
            .field("config", &self.config)
            .field("shape", &self.net.input_shape())
            .field("params", &self.online.len())
            .field("scale", &self.scale)
            .finish()
    }
}

impl ConsistencyModel {
    /// Freshly initialized model for `n_r × n_t` channels; EMA starts equal to
    /// the online weights.
    pub fn new<R: rand::Rng + ?Sized>(
        config: &CmConfig,
        n_r: usize,
        n_t: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidConfig(format!("normalization scale {scale} must be positive")));
        }
        let net = UNet::new(&config.backbone, n_r, n_t)?;
        let online = net.init_params(rng);
        let ema = online.clone();
        Ok(Self {
            config: config.clone(),
            net,
            online,
            ema,
            scale,
        })
    }

    pub(crate) fn from_parts(config: CmConfig, net: UNet, online: Vec<f32>, ema: Vec<f32>, scale: f64) -> Self {
        Self {
            config,
            net,
            online,
            ema,
            scale,
        }
    }

    pub fn config(&self) -> &CmConfig {
        &self.config
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn shape(&self) -> (usize, usize) {
        self.net.input_shape()
    }

    /// Multiplier mapping raw channel entries to the training scale.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn params(&self, set: ParamSet) -> &[f32] {
        match set {
            ParamSet::Online => &self.online,
            ParamSet::Ema => &self.ema,
        }
    }

    pub(crate) fn params_mut(&mut self) -> (&mut Vec<f32>, &mut Vec<f32>) {
        (&mut self.online, &mut self.ema)
    }

    /// Fails with `VersionMismatch` when the model was built for other dims.
    pub fn ensure_shape(&self, n_r: usize, n_t: usize) -> Result<()> {
        let (r, t) = self.shape();
        if (r, t) != (n_r, n_t) {
            return Err(Error::VersionMismatch(format!(
                "checkpoint trained for {r}x{t} channels, requested {n_r}x{n_t}"
            )));
        }
        Ok(())
    }

    fn check_level(&self, t: f64) -> Result<()> {
        let tol = 1e-12 * self.config.t_max;
        if !(t >= self.config.epsilon - tol && t <= self.config.t_max + tol) {
            return Err(Error::NoiseLevelOutOfRange {
                t,
                min: self.config.epsilon,
                max: self.config.t_max,
            });
        }
        Ok(())
    }

    /// `c_skip(t)·x + c_out(t)·F_θ(c_in(t)·x, t)` using the EMA weights.
    pub fn forward(&self, x: &Act<f64>, t: f64) -> Result<Act<f64>> {
        self.forward_with(ParamSet::Ema, x, t)
    }

    pub fn forward_with(&self, set: ParamSet, x: &Act<f64>, t: f64) -> Result<Act<f64>> {
        self.check_level(t)?;
        let (n_r, n_t) = self.shape();
        if (x.c, x.h, x.w) != (2, n_r, n_t) {
            return Err(Error::ShapeMismatch {
                expected: format!("2x{n_r}x{n_t}"),
                found: format!("{}x{}x{}", x.c, x.h, x.w),
            });
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "consistency model input",
            });
        }
        let c_in = self.config.c_in(t);
        let scaled: Vec<f32> = x.data.iter().map(|&v| (v * c_in) as f32).collect();
        let (f, _) = self
            .net
            .forward(self.params(set), Act::from_vec(2, n_r, n_t, scaled), self.config.c_noise(t));
        let (skip, out) = (self.config.c_skip(t), self.config.c_out(t));
        let data = x
            .data
            .iter()
            .zip(&f.data)
            .map(|(&xv, &fv)| skip * xv + out * fv as f64)
            .collect();
        Ok(Act::from_vec(2, n_r, n_t, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn preconditioner_boundary_values() {
        let c = CmConfig::full();
        assert_eq!(c.c_skip(c.epsilon), 1.0);
        assert_eq!(c.c_out(c.epsilon), 0.0);
        assert!(c.c_skip(c.t_max) < 0.05);
    }

    #[test]
    fn two_level_grid_is_the_interval() {
        assert_eq!(noise_grid(&CmConfig::full(), 2), vec![0.002, 0.13]);
    }

    #[test]
    fn grid_is_strictly_increasing() {
        let c = CmConfig::full();
        for k in [2, 3, 10, 640] {
            let g = noise_grid(&c, k);
            assert_eq!(g.len(), k);
            assert!(g.windows(2).all(|w| w[0] < w[1]));
            assert_eq!((g[0], g[k - 1]), (c.epsilon, c.t_max));
        }
    }

    #[test]
    fn unit_exponent_gives_uniform_spacing() {
        let c = CmConfig {
            rho_grid: 1.0,
            ..CmConfig::full()
        };
        let g = noise_grid(&c, 10);
        for (i, v) in g.iter().enumerate() {
            let expected = 0.002 + i as f64 * (0.13 - 0.002) / 9.0;
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let c = CmConfig::full();
        for total in [7, 100, 5000, 50_000] {
            assert_eq!(discretization_schedule(&c, 0, total), 10);
            assert_eq!(discretization_schedule(&c, total - 1, total), 640);
            let mut prev = 0;
            for s in 0..total {
                let k = discretization_schedule(&c, s, total);
                assert!(k >= prev && (10..=640).contains(&k));
                prev = k;
            }
        }
    }

    #[test]
    fn untrained_model_boundary_and_shape() {
        let c = CmConfig::desk();
        let m = ConsistencyModel::new(&c, 16, 64, 1.0, &mut seeded(3)).unwrap();
        let mut rng = seeded(4);
        let x = Act::from_vec(2, 16, 64, (0..2048).map(|_| StandardNormal.sample(&mut rng)).collect());
        let y = m.forward(&x, c.epsilon).unwrap();
        assert!(y.data.iter().zip(&x.data).all(|(a, b)| (a - b).abs() < 1e-6));
        let z = m.forward(&x, c.t_max).unwrap();
        assert_eq!((z.c, z.h, z.w), (2, 16, 64));
        assert!(z.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_range_level_rejected() {
        let c = CmConfig::desk();
        let m = ConsistencyModel::new(&c, 4, 4, 1.0, &mut seeded(3)).unwrap();
        let x = Act::zeros(2, 4, 4);
        assert!(matches!(m.forward(&x, 0.5), Err(Error::NoiseLevelOutOfRange { .. })));
        assert!(matches!(m.forward(&x, 0.0), Err(Error::NoiseLevelOutOfRange { .. })));
        assert_eq!(m.ensure_shape(4, 8).unwrap_err().kind(), "VersionMismatch");
    }
}
