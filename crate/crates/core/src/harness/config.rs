//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::channel::{ArrayGeometry, PathSamplerConfig};
use crate::cm::CmConfig;
use crate::denoiser::DenoiserKind;
use crate::pnp::{ScheduleGrid, ScheduleParams};
use crate::solver::SolverKind;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// SNR values in dB; `"inf"` in JSON denotes a noiseless observation.
pub mod snr_serde {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(v: f64) -> Repr {
        if v == f64::INFINITY {
            Repr::Text("inf".into())
        } else {
            Repr::Num(v)
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> std::result::Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) if s == "inf" || s == "+inf" => Ok(f64::INFINITY),
            Repr::Text(s) => Err(E::custom(format!("invalid SNR `{s}`"))),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod list {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
            v.iter().map(|&x| to_repr(x)).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraysConfig {
    pub tx: ArrayGeometry,
    pub rx: ArrayGeometry,
}

impl Default for ArraysConfig {
    fn default() -> Self {
        Self {
            tx: ArrayGeometry::default_tx(),
            rx: ArrayGeometry::default_rx(),
        }
    }
}

/// Where evaluation channels come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSource {
    /// Fresh synthetic channels, one seeded stream per sample index.
    Synthetic {
        #[serde(default)]
        sampler: PathSamplerConfig,
    },
    /// Channels from a dataset file written by `gen-data`; sample `i` is the
    /// file's `i`-th channel.
    File { path: PathBuf },
}

impl Default for ChannelSource {
    fn default() -> Self {
        Self::Synthetic {
            sampler: PathSamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookPolicy {
    /// Fresh pilots and combiners for every sample.
    PerSample,
    /// One codebook per pilot ratio shared by all samples.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotSettings {
    pub alphas: Vec<f64>,
    #[serde(default = "one")]
    pub n_rf: usize,
    #[serde(default = "four")]
    pub phase_bits: u32,
    #[serde(default = "unit")]
    pub pilot_amplitude: f64,
    #[serde(default = "per_sample")]
    pub codebook: CodebookPolicy,
}

fn one() -> usize {
    1
}
fn four() -> u32 {
    4
}
fn unit() -> f64 {
    1.0
}
fn per_sample() -> CodebookPolicy {
    CodebookPolicy::PerSample
}

impl Default for PilotSettings {
    fn default() -> Self {
        Self {
            alphas: vec![1.0],
            n_rf: 1,
            phase_bits: 4,
            pilot_amplitude: 1.0,
            codebook: CodebookPolicy::PerSample,
        }
    }
}

/// Source of the PnP schedule for each SNR.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSource {
    /// Table compiled into the crate.
    #[default]
    Shipped,
    /// Table written by `tune`.
    File { path: PathBuf },
    /// The same parameters at every SNR.
    Fixed { params: ScheduleParams },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataGenConfig {
    pub count: usize,
    #[serde(default)]
    pub sampler: PathSamplerConfig,
    /// Optional CSV path file; when set, channels come from it instead.
    #[serde(default)]
    pub csv: Option<PathBuf>,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            count: 2200,
            sampler: PathSamplerConfig::default(),
            csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Dataset file; synthetic channels are drawn when absent.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Number of leading samples used for training; the rest are held out.
    pub train_samples: usize,
    #[serde(default = "CmConfig::desk")]
    pub cm: CmConfig,
    #[serde(default = "eval_every")]
    pub eval_every: usize,
    #[serde(default = "eval_samples")]
    pub eval_samples: usize,
}

fn eval_every() -> usize {
    500
}
fn eval_samples() -> usize {
    64
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            train_samples: 2000,
            cm: CmConfig::desk(),
            eval_every: eval_every(),
            eval_samples: eval_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningConfig {
    pub n_validation: usize,
    pub alpha: f64,
    pub grid: ScheduleGrid,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            n_validation: 40,
            alpha: 1.0,
            grid: ScheduleGrid {
                t_hi: vec![0.3, 0.5, 0.8, 1.2],
                t_lo: vec![0.1, 0.2, 0.3],
                rho: vec![0.03, 0.1, 0.3, 1.0, 3.0, 10.0],
                beta: vec![0.0, 0.2],
                n_iters: 4,
            },
        }
    }
}

/// Full experiment description. Every section has defaults, so `{}` plus a
/// schema version is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub arrays: ArraysConfig,
    #[serde(default)]
    pub channels: ChannelSource,
    #[serde(default)]
    pub pilots: PilotSettings,
    #[serde(default = "default_snrs", with = "snr_serde::list")]
    pub snr_db: Vec<f64>,
    #[serde(default = "hundred")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "cm_kind")]
    pub denoiser: DenoiserKind,
    /// Threshold multiplier for the soft-threshold denoiser.
    #[serde(default = "unit")]
    pub soft_lambda: f64,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleSource,
    #[serde(default = "four_iters")]
    pub n_iters: usize,
    #[serde(default)]
    pub solver: SolverKind,
    #[serde(default = "results_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataGenConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub tuning: TuningConfig,
}

fn default_snrs() -> Vec<f64> {
    vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0]
}
fn hundred() -> usize {
    100
}
fn cm_kind() -> DenoiserKind {
    DenoiserKind::Cm
}
fn four_iters() -> usize {
    4
}
fn results_dir() -> PathBuf {
    PathBuf::from("results")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            arrays: ArraysConfig::default(),
            channels: ChannelSource::default(),
            pilots: PilotSettings::default(),
            snr_db: default_snrs(),
            n_samples: hundred(),
            seed: 0,
            denoiser: DenoiserKind::Cm,
            soft_lambda: 1.0,
            checkpoint: None,
            schedule: ScheduleSource::Shipped,
            n_iters: 4,
            solver: SolverKind::default(),
            output_dir: results_dir(),
            data: DataGenConfig::default(),
            training: TrainingConfig::default(),
            tuning: TuningConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::VersionMismatch(format!(
                    "config schema {v}, expected {SCHEMA_VERSION}"
                )))
            }
            None => return Err(Error::InvalidConfig("config lacks schema_version".into())),
        }
        let config: Self = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.arrays.tx.validate()?;
        self.arrays.rx.validate()?;
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
        }
        if self.snr_db.is_empty() {
            return Err(Error::InvalidConfig("snr_db must not be empty".into()));
        }
        if let Some(bad) = self.snr_db.iter().find(|s| s.is_nan() || **s == f64::NEG_INFINITY) {
            return Err(Error::InvalidConfig(format!("invalid SNR {bad}")));
        }
        if self.pilots.alphas.is_empty() {
            return Err(Error::InvalidConfig("at least one pilot ratio is required".into()));
        }
        if let Some(bad) = self.pilots.alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::InvalidRange(format!("pilot ratio {bad} outside (0, 1]")));
        }
        if self.n_iters == 0 {
            return Err(Error::InvalidConfig("n_iters must be at least 1".into()));
        }
        if let SolverKind::Cg(s) = &self.solver {
            s.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn infinite_snr_round_trips() {
        let c = ExperimentConfig::from_json(r#"{"schema_version": 1, "snr_db": ["inf", 20]}"#).unwrap();
        assert_eq!(c.snr_db, vec![f64::INFINITY, 20.0]);
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn schema_and_field_checks() {
        assert_eq!(
            ExperimentConfig::from_json(r#"{"schema_version": 9}"#).unwrap_err().kind(),
            "VersionMismatch"
        );
        assert!(ExperimentConfig::from_json(r#"{}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1, "n_samples": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1, "snr_db": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1, "pilots": {"alphas": [1.5]}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1, "bogus": 3}"#).is_err());
    }
}
