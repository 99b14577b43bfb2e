//! Denoisers callable from the PnP loop, and the bridge between complex
//! channel vectors and the two-channel real tensors the network consumes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cm::{load_checkpoint, Act, ConsistencyModel};
use crate::{CVec, Error, Result};

/// Two-channel real tensor `[Re, Im] × n_r × n_t`.
pub type ChannelTensor = Act<f64>;

/// Splits the column-major unvec of `v` into real and imaginary planes.
/// Entry `(i, j)` of the `n_r × n_t` matrix lands at row `i`, column `j` of
/// each plane.
pub fn complex_to_channels(v: &CVec, n_r: usize, n_t: usize) -> Result<ChannelTensor> {
    crate::error::check_dims("complex_to_channels", n_r * n_t, v.len())?;
    let plane = n_r * n_t;
    let mut data = vec![0.0; 2 * plane];
    for j in 0..n_t {
        for i in 0..n_r {
            let z = v[i + j * n_r];
            data[i * n_t + j] = z.re;
            data[plane + i * n_t + j] = z.im;
        }
    }
    Ok(Act::from_vec(2, n_r, n_t, data))
}

/// Exact inverse of [`complex_to_channels`].
pub fn channels_to_complex(s: &ChannelTensor) -> Result<CVec> {
    if s.c != 2 {
        return Err(Error::DimensionMismatch {
            context: "channels_to_complex",
            expected: 2,
            found: s.c,
        });
    }
    let (n_r, n_t) = (s.h, s.w);
    let plane = n_r * n_t;
    crate::error::check_dims("channels_to_complex", 2 * plane, s.data.len())?;
    let mut v = CVec::zeros(plane);
    for j in 0..n_t {
        for i in 0..n_r {
            v[i + j * n_r] = Complex64::new(s.data[i * n_t + j], s.data[plane + i * n_t + j]);
        }
    }
    Ok(v)
}

/// Selector used by configs and the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserKind {
    Cm,
    Identity,
    Soft,
    Oracle,
}

impl FromStr for DenoiserKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cm" => Ok(Self::Cm),
            "identity" => Ok(Self::Identity),
            "soft" | "soft_threshold" => Ok(Self::Soft),
            "oracle" => Ok(Self::Oracle),
            other => Err(Error::InvalidConfig(format!("unknown denoiser kind `{other}`"))),
        }
    }
}

impl fmt::Display for DenoiserKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Cm => "cm",
            Self::Identity => "identity",
            Self::Soft => "soft",
            Self::Oracle => "oracle",
        };
        f.write_str(s)
    }
}

/// Consistency model applied in raw channel units through its normalization.
#[derive(Debug)]
pub struct CmDenoiser {
    model: ConsistencyModel,
    clamped: AtomicU64,
}

impl CmDenoiser {
    pub fn new(model: ConsistencyModel) -> Self {
        Self {
            model,
            clamped: AtomicU64::new(0),
        }
    }

    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(load_checkpoint(path)?))
    }

    pub fn model(&self) -> &ConsistencyModel {
        &self.model
    }

    /// Number of calls whose level had to be clamped into `[ε, T]`.
    pub fn clamp_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Network level used for a raw-unit request `t`.
    pub fn network_level(&self, t: f64) -> f64 {
        let cfg = self.model.config();
        (t * self.model.scale()).clamp(cfg.epsilon, cfg.t_max)
    }

    fn denoise(&self, v: &CVec, t: f64) -> Result<CVec> {
        let (n_r, n_t) = self.model.shape();
        if v.len() != n_r * n_t {
            return Err(Error::ShapeMismatch {
                expected: format!("{} entries ({n_r}x{n_t})", n_r * n_t),
                found: format!("{} entries", v.len()),
            });
        }
        let scale = self.model.scale();
        let requested = t * scale;
        let level = self.network_level(t);
        if level != requested {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            log::debug!("denoiser level {requested:.4e} clamped to {level:.4e}");
        }
        let x = complex_to_channels(&(v * Complex64::from(scale)), n_r, n_t)?;
        let out = self.model.forward(&x, level)?;
        Ok(channels_to_complex(&out)? / Complex64::from(scale))
    }
}

/// Denoiser handle `D(v, t)`; cheap to clone and safe to share across threads.
#[derive(Debug, Clone)]
pub enum Denoiser {
    Identity,
    /// Complex soft shrinkage with threshold `lambda · t`.
    SoftThreshold { lambda: f64 },
    /// Returns the stored ground truth regardless of the input.
    Oracle { truth: Arc<CVec> },
    Cm(Arc<CmDenoiser>),
}

impl Denoiser {
    pub fn kind(&self) -> DenoiserKind {
        match self {
            Self::Identity => DenoiserKind::Identity,
            Self::SoftThreshold { .. } => DenoiserKind::Soft,
            Self::Oracle { .. } => DenoiserKind::Oracle,
            Self::Cm(_) => DenoiserKind::Cm,
        }
    }

    pub fn cm(model: ConsistencyModel) -> Self {
        Self::Cm(Arc::new(CmDenoiser::new(model)))
    }

    pub fn oracle(truth: CVec) -> Self {
        Self::Oracle { truth: Arc::new(truth) }
    }

    /// Builds a CM denoiser from a checkpoint path, failing with
    /// `MissingCheckpoint` when none is given.
    pub fn cm_from_checkpoint(path: Option<&Path>) -> Result<Self> {
        let path = path.ok_or(Error::MissingCheckpoint)?;
        Ok(Self::Cm(Arc::new(CmDenoiser::from_checkpoint(path)?)))
    }

    pub fn denoise(&self, v: &CVec, t: f64) -> Result<CVec> {
        if !(t >= 0.0) {
            return Err(Error::NoiseLevelOutOfRange {
                t,
                min: 0.0,
                max: f64::INFINITY,
            });
        }
        match self {
            Self::Identity => Ok(v.clone()),
            Self::SoftThreshold { lambda } => Ok(soft_threshold(v, lambda * t)),
            Self::Oracle { truth } => {
                if truth.len() != v.len() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{} entries", truth.len()),
                        found: format!("{} entries", v.len()),
                    });
                }
                Ok(truth.as_ref().clone())
            }
            Self::Cm(cm) => cm.denoise(v, t),
        }
    }
}

/// `sign(v_i) · max(|v_i| − tau, 0)` with `sign(v) = v / |v|`.
pub fn soft_threshold(v: &CVec, tau: f64) -> CVec {
    v.map(|z| {
        let mag = z.norm();
        if mag <= tau || mag == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            z * ((mag - tau) / mag)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cm::{BackboneConfig, CmConfig};
    use crate::measurement::complex_gaussian;
    use crate::rng::seeded;

    #[test]
    fn constant_vector_splits_into_planes() {
        let v = CVec::from_element(6, Complex64::new(1.0, 2.0));
        let s = complex_to_channels(&v, 2, 3).unwrap();
        assert!(s.data[..6].iter().all(|&x| x == 1.0));
        assert!(s.data[6..].iter().all(|&x| x == 2.0));
    }

    #[test]
    fn bridge_round_trip_and_isometry() {
        let v = complex_gaussian(&mut seeded(1), 12, 1.0);
        let s = complex_to_channels(&v, 3, 4).unwrap();
        assert_eq!(channels_to_complex(&s).unwrap(), v);
        let n: f64 = s.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - v.norm()).abs() < 1e-12);
    }

    #[test]
    fn bridge_rejects_bad_lengths() {
        let v = CVec::zeros(5);
        assert!(complex_to_channels(&v, 2, 3).is_err());
        assert!(channels_to_complex(&Act::zeros(3, 2, 2)).is_err());
    }

    #[test]
    fn simple_denoisers() {
        let v = complex_gaussian(&mut seeded(2), 8, 1.0);
        assert_eq!(Denoiser::Identity.denoise(&v, 0.3).unwrap(), v);
        assert_eq!(Denoiser::SoftThreshold { lambda: 2.0 }.denoise(&v, 0.0).unwrap(), v);
        let truth = complex_gaussian(&mut seeded(3), 8, 1.0);
        assert_eq!(Denoiser::oracle(truth.clone()).denoise(&v, 1.0).unwrap(), truth);
        assert!(Denoiser::Identity.denoise(&v, -1.0).is_err());
    }

    #[test]
    fn shrinkage_of_known_magnitude() {
        let phi = 0.7f64;
        let v = CVec::from_element(3, Complex64::from_polar(3.0, phi));
        let out = Denoiser::SoftThreshold { lambda: 0.5 }.denoise(&v, 2.0).unwrap();
        for z in out.iter() {
            assert!((z - Complex64::from_polar(2.0, phi)).norm() < 1e-12);
        }
    }

    #[test]
    fn missing_checkpoint_reported() {
        assert_eq!(Denoiser::cm_from_checkpoint(None).unwrap_err().kind(), "MissingCheckpoint");
    }

    #[test]
    fn cm_denoiser_clamps_and_checks_shape() {
        let config = CmConfig {
            backbone: BackboneConfig {
                base_channels: 4,
                channel_mults: vec![1, 2],
                res_blocks: 1,
                emb_dim: 8,
            },
            ..CmConfig::desk()
        };
        let model = ConsistencyModel::new(&config, 4, 4, 2.0, &mut seeded(1)).unwrap();
        let d = Denoiser::cm(model);
        let v = complex_gaussian(&mut seeded(4), 16, 1.0);
        // Level 0 clamps to the boundary, where the model is the identity.
        let out = d.denoise(&v, 0.0).unwrap();
        assert!((out - &v).camax() < 1e-6);
        if let Denoiser::Cm(cm) = &d {
            assert_eq!(cm.clamp_count(), 1);
        }
        let err = d.denoise(&CVec::zeros(9), 0.01).unwrap_err();
        assert_eq!(err.kind(), "ShapeMismatch");
    }
}
