//! Pilot codebooks, the Kronecker measurement operator and noisy observations.
//!
//! With column-major `vec`, the received pilots satisfy
//! `vec(W^H H X_p) = (X_p^T conj(F_t)) ⊗ (W^H F_r) · vec(H_a)`, so the operator
//! is stored as its two Kronecker factors and applied as
//! `vec(R · unvec(h) · L^T)` without ever forming the dense matrix.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::DftDictionary;
use crate::error::check_dims;
use crate::{CMat, CVec, Error, Result};

/// Largest operator size for which [`MeasurementOperator::to_dense`] is allowed.
pub const DENSE_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    /// Transmit scans `M_t`.
    pub m_t: usize,
    /// Receive scans `M_r`.
    pub m_r: usize,
    /// Receive RF chains per scan.
    pub n_rf: usize,
    pub phase_bits: u32,
    pub pilot_amplitude: f64,
}

impl PilotConfig {
    pub fn new(m_t: usize, m_r: usize) -> Self {
        Self {
            m_t,
            m_r,
            n_rf: 1,
            phase_bits: 4,
            pilot_amplitude: 1.0,
        }
    }

    /// Number of scalar observations `M_t · M_r · N_RF`.
    pub fn measurements(&self) -> usize {
        self.m_t * self.m_r * self.n_rf
    }

    /// Receive-side combiner columns `M_r · N_RF`.
    pub fn combiner_columns(&self) -> usize {
        self.m_r * self.n_rf
    }

    pub fn pilot_ratio(&self, n_t: usize, n_r: usize) -> f64 {
        self.measurements() as f64 / (n_t * n_r) as f64
    }

    pub fn validate(&self, n_t: usize, n_r: usize) -> Result<()> {
        if self.m_t == 0 || self.m_t > n_t {
            return Err(Error::InvalidConfig(format!(
                "m_t = {} must lie in [1, {n_t}]",
                self.m_t
            )));
        }
        if self.n_rf == 0 || self.m_r == 0 || self.combiner_columns() > n_r {
            return Err(Error::InvalidConfig(format!(
                "m_r * n_rf = {} must lie in [1, {n_r}]",
                self.combiner_columns()
            )));
        }
        if self.phase_bits == 0 || self.phase_bits > 16 {
            return Err(Error::InvalidConfig(format!(
                "phase_bits = {} must lie in [1, 16]",
                self.phase_bits
            )));
        }
        if !(self.pilot_amplitude > 0.0 && self.pilot_amplitude.is_finite()) {
            return Err(Error::InvalidConfig("pilot amplitude must be positive".into()));
        }
        Ok(())
    }
}

fn quantized_phase_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    bits: u32,
    magnitude: f64,
) -> CMat {
    let levels = 1u32 << bits;
    CMat::from_fn(rows, cols, |_, _| {
        let k = rng.random_range(0..levels);
        Complex64::from_polar(magnitude, 2.0 * PI * k as f64 / levels as f64)
    })
}

/// Draws the transmit pilots `X_p` (`N_t × M_t`) and the training combiner
/// `W_RF` (`N_r × M_r N_RF`) as constant-modulus quantized random phases.
pub fn generate_codebooks<R: Rng + ?Sized>(
    rng: &mut R,
    config: &PilotConfig,
    n_t: usize,
    n_r: usize,
) -> Result<(CMat, CMat)> {
    config.validate(n_t, n_r)?;
    let x_p = quantized_phase_matrix(
        rng,
        n_t,
        config.m_t,
        config.phase_bits,
        config.pilot_amplitude / (n_t as f64).sqrt(),
    );
    let w_rf = quantized_phase_matrix(
        rng,
        n_r,
        config.combiner_columns(),
        config.phase_bits,
        1.0 / (n_r as f64).sqrt(),
    );
    Ok((x_p, w_rf))
}

/// Matrix-free `A = L ⊗ R` acting on column-major vectorized `N_r × N_t` channels.
#[derive(Debug, Clone)]
pub struct MeasurementOperator {
    /// `L = X_p^T conj(F_t)`, `M_t × N_t`.
    left: CMat,
    /// `R = W_RF^H F_r`, `(M_r N_RF) × N_r`.
    right: CMat,
    left_t: CMat,
    left_conj: CMat,
    right_h: CMat,
}

impl MeasurementOperator {
    /// Builds the operator directly from its Kronecker factors.
    pub fn from_factors(left: CMat, right: CMat) -> Self {
        Self {
            left_t: left.transpose(),
            left_conj: left.conjugate(),
            right_h: right.adjoint(),
            left,
            right,
        }
    }

    pub fn left_factor(&self) -> &CMat {
        &self.left
    }

    pub fn right_factor(&self) -> &CMat {
        &self.right
    }

    pub fn rows(&self) -> usize {
        self.left.nrows() * self.right.nrows()
    }

    pub fn cols(&self) -> usize {
        self.left.ncols() * self.right.ncols()
    }

    /// Channel matrix shape `(N_r, N_t)`.
    pub fn channel_shape(&self) -> (usize, usize) {
        (self.right.ncols(), self.left.ncols())
    }

    /// `A h = vec(R · unvec(h) · L^T)`.
    pub fn apply(&self, h: &CVec) -> Result<CVec> {
        check_dims("apply", self.cols(), h.len())?;
        let (n_r, n_t) = self.channel_shape();
        let x = CMat::from_column_slice(n_r, n_t, h.as_slice());
        let y = &self.right * x * &self.left_t;
        Ok(CVec::from_vec(y.data.into()))
    }

    /// `A^H v = vec(R^H · unvec(v) · conj(L))`.
    pub fn adjoint_apply(&self, v: &CVec) -> Result<CVec> {
        check_dims("adjoint_apply", self.rows(), v.len())?;
        let y = CMat::from_column_slice(self.right.nrows(), self.left.nrows(), v.as_slice());
        let x = &self.right_h * y * &self.left_conj;
        Ok(CVec::from_vec(x.data.into()))
    }

    /// `(A^H A + ρI) z`.
    pub fn normal_apply(&self, z: &CVec, rho: f64) -> Result<CVec> {
        let mut out = self.adjoint_apply(&self.apply(z)?)?;
        out.axpy(Complex64::from(rho), z, Complex64::from(1.0));
        Ok(out)
    }

    /// Dense `L ⊗ R`; refused above [`DENSE_LIMIT`] columns.
    pub fn to_dense(&self) -> Result<CMat> {
        if self.cols() > DENSE_LIMIT {
            return Err(Error::InvalidConfig(format!(
                "refusing to materialize a dense operator with {} columns",
                self.cols()
            )));
        }
        Ok(self.left.kronecker(&self.right))
    }
}

/// Forms `L = X_p^T conj(F_t)` and `R = W_RF^H F_r`.
pub fn assemble_operator(
    x_p: &CMat,
    w_rf: &CMat,
    f_t: &DftDictionary,
    f_r: &DftDictionary,
) -> Result<MeasurementOperator> {
    check_dims("assemble_operator: X_p rows vs F_t", f_t.matrix.nrows(), x_p.nrows())?;
    check_dims("assemble_operator: W_RF rows vs F_r", f_r.matrix.nrows(), w_rf.nrows())?;
    let left = x_p.transpose() * f_t.matrix.conjugate();
    let right = w_rf.adjoint() * &f_r.matrix;
    Ok(MeasurementOperator::from_factors(left, right))
}

/// Received pilot observation `y = A h + n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: Vec<Complex64>,
    /// Target SNR in dB; `+inf` marks a noiseless observation.
    pub snr_db: f64,
    /// Noise variance per complex entry.
    pub noise_var: f64,
    pub truth_ref: Option<String>,
}

impl Observation {
    pub fn y_vec(&self) -> CVec {
        CVec::from_column_slice(&self.y)
    }
}

/// Circular complex Gaussian vector with per-entry variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, len: usize, var: f64) -> CVec {
    let std = (var / 2.0).sqrt();
    CVec::from_fn(len, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(std * re, std * im)
    })
}

/// Simulates `y = A h + n` with per-sample SNR calibration:
/// `σ_n² = (‖A h‖² / M) · 10^(−snr_db/10)`.
pub fn observe<R: Rng + ?Sized>(
    op: &MeasurementOperator,
    h_true: &CVec,
    snr_db: f64,
    rng: &mut R,
) -> Result<Observation> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidConfig(format!("snr_db must be finite or +inf, got {snr_db}")));
    }
    let signal = op.apply(h_true)?;
    let m = signal.len();
    if snr_db == f64::INFINITY {
        return Ok(Observation {
            y: signal.as_slice().to_vec(),
            snr_db,
            noise_var: 0.0,
            truth_ref: None,
        });
    }
    let energy = signal.norm_squared();
    if energy == 0.0 {
        return Err(Error::ZeroSignal);
    }
    let noise_var = energy / m as f64 * 10f64.powf(-snr_db / 10.0);
    let y = signal + complex_gaussian(rng, m, noise_var);
    Ok(Observation {
        y: y.as_slice().to_vec(),
        snr_db,
        noise_var,
        truth_ref: None,
    })
}

/// Picks a balanced `(M_t, M_r)` scan configuration whose pilot ratio is
/// close to `target_alpha`.
///
/// For every receive scan count the transmit count nearest the target is
/// taken; among those candidates the one with the most balanced per-side
/// fractions `M_t/N_t` and `M_r N_RF/N_r` wins, then the smaller ratio
/// error, then the smaller `M_t`.
pub fn search_pilot_config(target_alpha: f64, n_t: usize, n_r: usize, n_rf: usize) -> Result<PilotConfig> {
    if !(target_alpha > 0.0 && target_alpha <= 1.0) {
        return Err(Error::InvalidRange(format!(
            "target pilot ratio {target_alpha} must lie in (0, 1]"
        )));
    }
    if n_t == 0 || n_r == 0 || n_rf == 0 || n_rf > n_r {
        return Err(Error::InvalidConfig("array sizes and n_rf must be positive, n_rf <= n_r".into()));
    }
    let n = (n_t * n_r) as f64;
    let mut best: Option<((f64, f64, usize), usize, usize)> = None;
    for m_r in 1..=n_r / n_rf {
        let rx = (m_r * n_rf) as f64;
        let ideal = target_alpha * n / rx;
        // Nearest integer, ties toward the smaller count.
        let mut m_t = ideal.floor() as usize;
        if ideal - m_t as f64 > 0.5 {
            m_t += 1;
        }
        let m_t = m_t.clamp(1, n_t);
        let balance = (m_t as f64 / n_t as f64 - rx / n_r as f64).abs();
        let err = (m_t as f64 * rx / n - target_alpha).abs();
        let key = (balance, err, m_t);
        let better = match &best {
            None => true,
            Some((k, _, _)) => {
                (key.0, key.1, key.2).partial_cmp(&(k.0, k.1, k.2)) == Some(std::cmp::Ordering::Less)
            }
        };
        if better {
            best = Some((key, m_t, m_r));
        }
    }
    let (_, m_t, m_r) = best.expect("at least one receive scan count");
    Ok(PilotConfig {
        m_t,
        m_r,
        n_rf,
        ..PilotConfig::new(m_t, m_r)
    })
}
