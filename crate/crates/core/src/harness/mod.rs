//! Experiment driver: dataset generation, training from a config, schedule
//! tuning, seeded estimation sweeps and report emission.

mod config;

pub use config::{
    snr_serde, ArraysConfig, ChannelSource, CodebookPolicy, DataGenConfig, ExperimentConfig, PilotSettings,
    ScheduleSource, TrainingConfig, TuningConfig, SCHEMA_VERSION,
};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    build_dictionary, load_path_file, sample_synthetic_paths, synthesize_channel, ChannelDataset, ChannelSample,
    DftDictionary,
};
use crate::cm::{train, ConsistencyModel, LossTrace, TrainOptions};
use crate::denoiser::{Denoiser, DenoiserKind};
use crate::measurement::{assemble_operator, generate_codebooks, observe, search_pilot_config, MeasurementOperator, PilotConfig};
use crate::pnp::{run_with_solver, shipped_table, tune_schedule, IterationRecord, PnpSchedule, ScheduleTable, TuningResult, ValidationCase};
use crate::rng::{derive_seed, rng_from};
use crate::solver::DataConsistencySolver;
use crate::{CMat, CVec, Error, Result};

/// dB value reported for an exact (zero-error) estimate.
pub const NMSE_DB_FLOOR: f64 = -300.0;

pub const AVERAGING: &str = "aggregate dB = 10*log10(mean of per-sample linear NMSE)";
pub const SNR_DEFINITION: &str =
    "per observation: noise variance = ||A h||^2 / M * 10^(-snr/10), M = number of pilot measurements";

const STREAM_CHANNEL: u64 = 1;
const STREAM_CODEBOOK: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_ACTIVE: u64 = 4;
const STREAM_DATA: u64 = 5;
const STREAM_TRAIN: u64 = 6;
const STREAM_VALIDATION: u64 = 7;

/// `‖ĥ − h‖² / ‖h‖²`.
pub fn nmse(h_hat: &CVec, h: &CVec) -> Result<f64> {
    crate::error::check_dims("nmse", h.len(), h_hat.len())?;
    let denom = h.norm_squared();
    if denom == 0.0 {
        return Err(Error::ZeroTruth);
    }
    Ok((h_hat - h).norm_squared() / denom)
}

/// `10 log10(x)`, floored at [`NMSE_DB_FLOOR`].
pub fn to_db(linear: f64) -> f64 {
    if linear > 0.0 {
        (10.0 * linear.log10()).max(NMSE_DB_FLOOR)
    } else {
        NMSE_DB_FLOOR
    }
}

pub fn version_string() -> String {
    format!("pnpcm-v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportMode {
    Sweep,
    Trace,
}

/// Aggregate over the samples of one (pilot ratio, SNR) setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub alpha_target: f64,
    /// Achieved pilot ratio `M_t M_r N_RF / (N_t N_r)`.
    pub alpha: f64,
    pub m_t: usize,
    pub m_r: usize,
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    pub n_samples: usize,
    pub mean_nmse: f64,
    pub mean_nmse_db: f64,
    /// Mean linear NMSE after each outer iteration, in execution order.
    pub mean_trace: Vec<f64>,
    pub mean_trace_db: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    /// Index into [`EstimationReport::settings`].
    pub setting: usize,
    pub sample_index: usize,
    pub sample_id: String,
    pub noise_var: f64,
    pub nmse: f64,
    pub nmse_db: f64,
    pub trace: Vec<IterationRecord>,
}

/// Wall-clock figures; written to their own file so reports stay
/// byte-reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub setup_seconds: f64,
    pub estimation_seconds: f64,
    pub estimates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub version: String,
    pub mode: ReportMode,
    pub averaging: String,
    pub snr_definition: String,
    pub seed: u64,
    pub denoiser: DenoiserKind,
    pub config: ExperimentConfig,
    pub settings: Vec<SettingSummary>,
    pub samples: Vec<SampleResult>,
    #[serde(skip)]
    pub timings: Timings,
}

pub const CSV_HEADER: [&str; 12] = [
    "alpha_target",
    "alpha",
    "snr_db",
    "sample_index",
    "sample_id",
    "iter",
    "n",
    "nmse",
    "nmse_db",
    "cg_iters",
    "cg_residual",
    "dual_residual",
];

fn snr_text(snr: f64) -> String {
    if snr == f64::INFINITY {
        "inf".into()
    } else {
        format!("{snr}")
    }
}

impl EstimationReport {
    /// Per-sample, per-iteration rows with a fixed column order.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        for s in &self.samples {
            let setting = self.settings.get(s.setting).ok_or_else(|| {
                Error::InvalidConfig(format!("sample refers to missing setting {}", s.setting))
            })?;
            for (k, r) in s.trace.iter().enumerate() {
                let lin = r.nmse.unwrap_or(f64::NAN);
                out.write_record([
                    format!("{}", setting.alpha_target),
                    format!("{}", setting.alpha),
                    snr_text(setting.snr_db),
                    s.sample_index.to_string(),
                    s.sample_id.clone(),
                    (k + 1).to_string(),
                    r.n.to_string(),
                    format!("{lin}"),
                    format!("{}", to_db(lin)),
                    r.cg_iters.to_string(),
                    format!("{}", r.cg_residual),
                    format!("{}", r.dual_residual),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Writes `report.csv`, `report.json` and `timings.json` into `dir` and
    /// returns the three paths.
    pub fn emit(&self, dir: impl AsRef<Path>) -> Result<[PathBuf; 3]> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join("report.csv");
        let json_path = dir.join("report.json");
        let timing_path = dir.join("timings.json");
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(&csv_path)?))?;
        std::fs::write(&json_path, self.to_json()?)?;
        std::fs::write(&timing_path, serde_json::to_string_pretty(&self.timings)? + "\n")?;
        Ok([csv_path, json_path, timing_path])
    }

    /// Summary of the setting matching `alpha_target` and `snr_db`.
    pub fn setting(&self, alpha_target: f64, snr_db: f64) -> Option<&SettingSummary> {
        self.settings
            .iter()
            .find(|s| s.alpha_target == alpha_target && s.snr_db == snr_db)
    }
}

/// Resolves the denoiser named by the config. The oracle is built per sample,
/// so `None` is returned for it.
pub fn resolve_denoiser(config: &ExperimentConfig) -> Result<Option<Denoiser>> {
    Ok(match config.denoiser {
        DenoiserKind::Identity => Some(Denoiser::Identity),
        DenoiserKind::Soft => Some(Denoiser::SoftThreshold {
            lambda: config.soft_lambda,
        }),
        DenoiserKind::Oracle => None,
        DenoiserKind::Cm => Some(Denoiser::cm_from_checkpoint(config.checkpoint.as_deref())?),
    })
}

/// Schedule table named by the config.
pub fn resolve_schedule_table(config: &ExperimentConfig) -> Result<ScheduleTable> {
    match &config.schedule {
        ScheduleSource::Shipped => Ok(shipped_table()),
        ScheduleSource::File { path } => ScheduleTable::from_json(&std::fs::read_to_string(path)?),
        ScheduleSource::Fixed { params } => {
            let mut table = ScheduleTable::default();
            for &snr in &config.snr_db {
                table.insert(snr, *params);
            }
            Ok(table)
        }
    }
}

enum Channels {
    Synthetic(crate::channel::PathSamplerConfig),
    Dataset(Arc<ChannelDataset>),
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    f_t: DftDictionary,
    f_r: DftDictionary,
    channels: Channels,
    pilots: Vec<PilotConfig>,
    shared_codebooks: Vec<Option<(CMat, CMat)>>,
    schedules: Vec<PnpSchedule>,
    denoiser: Option<Denoiser>,
}

impl<'a> Context<'a> {
    fn new(config: &'a ExperimentConfig, denoiser: Option<&Denoiser>) -> Result<Self> {
        config.validate()?;
        let (n_t, n_r) = (config.arrays.tx.size(), config.arrays.rx.size());
        let f_t = build_dictionary(&config.arrays.tx)?;
        let f_r = build_dictionary(&config.arrays.rx)?;
        let channels = match &config.channels {
            ChannelSource::Synthetic { sampler } => Channels::Synthetic(*sampler),
            ChannelSource::File { path } => {
                let data = ChannelDataset::load(path)?;
                if data.geom_t != config.arrays.tx || data.geom_r != config.arrays.rx {
                    return Err(Error::InvalidConfig(format!(
                        "dataset {} was generated for different array geometries",
                        path.display()
                    )));
                }
                if data.len() < config.n_samples {
                    return Err(Error::InvalidConfig(format!(
                        "dataset has {} channels, {} requested",
                        data.len(),
                        config.n_samples
                    )));
                }
                Channels::Dataset(Arc::new(data))
            }
        };
        let pilots = config
            .pilots
            .alphas
            .iter()
            .map(|&a| {
                let mut p = search_pilot_config(a, n_t, n_r, config.pilots.n_rf)?;
                p.phase_bits = config.pilots.phase_bits;
                p.pilot_amplitude = config.pilots.pilot_amplitude;
                p.validate(n_t, n_r)?;
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        let shared_codebooks = pilots
            .iter()
            .enumerate()
            .map(|(ai, p)| match config.pilots.codebook {
                CodebookPolicy::Shared => {
                    generate_codebooks(&mut rng_from(config.seed, &[STREAM_CODEBOOK, ai as u64]), p, n_t, n_r).map(Some)
                }
                CodebookPolicy::PerSample => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let table = resolve_schedule_table(config)?;
        let schedules = config
            .snr_db
            .iter()
            .map(|&snr| table.lookup(snr)?.schedule(config.n_iters))
            .collect::<Result<Vec<_>>>()?;
        let denoiser = match denoiser {
            Some(d) => Some(d.clone()),
            None => resolve_denoiser(config)?,
        };
        if let Some(Denoiser::Cm(cm)) = &denoiser {
            cm.model().ensure_shape(n_r, n_t)?;
        }
        Ok(Self {
            config,
            f_t,
            f_r,
            channels,
            pilots,
            shared_codebooks,
            schedules,
            denoiser,
        })
    }

    fn channel(&self, i: usize) -> Result<ChannelSample> {
        match &self.channels {
            Channels::Synthetic(sampler) => synthetic_channel(self.config, sampler, STREAM_CHANNEL, i),
            Channels::Dataset(data) => Ok(data.samples[i].clone()),
        }
    }

    fn operator(&self, ai: usize, i: usize) -> Result<MeasurementOperator> {
        let (n_t, n_r) = (self.config.arrays.tx.size(), self.config.arrays.rx.size());
        let (x_p, w_rf) = match &self.shared_codebooks[ai] {
            Some(c) => c.clone(),
            None => generate_codebooks(
                &mut rng_from(self.config.seed, &[STREAM_CODEBOOK, ai as u64, i as u64]),
                &self.pilots[ai],
                n_t,
                n_r,
            )?,
        };
        assemble_operator(&x_p, &w_rf, &self.f_t, &self.f_r)
    }

    /// Estimates sample `i` at every SNR for pilot setting `ai`.
    fn run_sample(&self, ai: usize, i: usize) -> Result<Vec<Estimate>> {
        let wrap = |snr_db: f64, e: Error| Error::AtSample {
            alpha: self.config.pilots.alphas[ai],
            snr_db,
            sample: i,
            source: Box::new(e),
        };
        let first_snr = self.config.snr_db[0];
        let channel = self.channel(i).map_err(|e| wrap(first_snr, e))?;
        let truth = channel.angular_vec();
        let op = self.operator(ai, i).map_err(|e| wrap(first_snr, e))?;
        let dc = DataConsistencySolver::new(&self.config.solver, &op);
        let oracle;
        let denoiser = match &self.denoiser {
            Some(d) => d,
            None => {
                oracle = Denoiser::oracle(truth.clone());
                &oracle
            }
        };
        let seed = self.config.seed;
        let mut out = Vec::with_capacity(self.config.snr_db.len());
        for (si, &snr) in self.config.snr_db.iter().enumerate() {
            let path = [ai as u64, si as u64, i as u64];
            let run = || -> Result<Estimate> {
                let obs = observe(&op, &truth, snr, &mut rng_from(seed, &[STREAM_NOISE, path[0], path[1], path[2]]))?;
                let mut active = rng_from(seed, &[STREAM_ACTIVE, path[0], path[1], path[2]]);
                let (h_hat, state) = run_with_solver(
                    &op,
                    &obs.y_vec(),
                    denoiser,
                    &self.schedules[si],
                    &dc,
                    &mut active,
                    Some(&truth),
                )?;
                let err = nmse(&h_hat, &truth)?;
                Ok(Estimate {
                    sample_id: channel.sample_id.clone(),
                    noise_var: obs.noise_var,
                    nmse: err,
                    h_hat,
                    trace: state.trace,
                })
            };
            out.push(run().map_err(|e| wrap(snr, e))?);
        }
        Ok(out)
    }
}

fn synthetic_channel(
    config: &ExperimentConfig,
    sampler: &crate::channel::PathSamplerConfig,
    stream: u64,
    i: usize,
) -> Result<ChannelSample> {
    let mut rng = rng_from(config.seed, &[stream, i as u64]);
    let paths = sample_synthetic_paths(&mut rng, sampler)?;
    let mut s = synthesize_channel(&config.arrays.tx, &config.arrays.rx, &paths)?;
    s.sample_id = format!("syn{i:06}");
    Ok(s)
}

/// One estimated channel.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub sample_id: String,
    pub noise_var: f64,
    pub nmse: f64,
    /// Angular-domain estimate, column-major vectorized.
    pub h_hat: CVec,
    pub trace: Vec<IterationRecord>,
}

fn run_report(config: &ExperimentConfig, denoiser: Option<&Denoiser>, mode: ReportMode) -> Result<EstimationReport> {
    let t0 = Instant::now();
    let ctx = Context::new(config, denoiser)?;
    let setup = t0.elapsed().as_secs_f64();
    let n_alpha = ctx.pilots.len();
    let n_snr = config.snr_db.len();
    let jobs: Vec<(usize, usize)> = (0..n_alpha)
        .flat_map(|ai| (0..config.n_samples).map(move |i| (ai, i)))
        .collect();
    let t1 = Instant::now();
    let results: Vec<Result<Vec<Estimate>>> = jobs.par_iter().map(|&(ai, i)| ctx.run_sample(ai, i)).collect();
    let estimation = t1.elapsed().as_secs_f64();

    let (n_t, n_r) = (config.arrays.tx.size(), config.arrays.rx.size());
    // results[ai * n_samples + i][si]
    let mut per_job = Vec::with_capacity(results.len());
    for r in results {
        per_job.push(r?);
    }
    let mut settings = Vec::with_capacity(n_alpha * n_snr);
    let mut samples = Vec::with_capacity(n_alpha * n_snr * config.n_samples);
    for ai in 0..n_alpha {
        let p = &ctx.pilots[ai];
        for si in 0..n_snr {
            let idx = settings.len();
            let mut sum = 0.0;
            let mut trace_sum = vec![0.0; config.n_iters];
            for i in 0..config.n_samples {
                let e = &per_job[ai * config.n_samples + i][si];
                sum += e.nmse;
                for (acc, r) in trace_sum.iter_mut().zip(&e.trace) {
                    *acc += r.nmse.unwrap_or(f64::NAN);
                }
                samples.push(SampleResult {
                    setting: idx,
                    sample_index: i,
                    sample_id: e.sample_id.clone(),
                    noise_var: e.noise_var,
                    nmse: e.nmse,
                    nmse_db: to_db(e.nmse),
                    trace: e.trace.clone(),
                });
            }
            let count = config.n_samples as f64;
            let mean = sum / count;
            let mean_trace: Vec<f64> = trace_sum.iter().map(|s| s / count).collect();
            settings.push(SettingSummary {
                alpha_target: config.pilots.alphas[ai],
                alpha: p.pilot_ratio(n_t, n_r),
                m_t: p.m_t,
                m_r: p.m_r,
                snr_db: config.snr_db[si],
                n_samples: config.n_samples,
                mean_nmse: mean,
                mean_nmse_db: to_db(mean),
                mean_trace_db: mean_trace.iter().map(|&v| to_db(v)).collect(),
                mean_trace,
            });
        }
    }
    Ok(EstimationReport {
        version: version_string(),
        mode,
        averaging: AVERAGING.into(),
        snr_definition: SNR_DEFINITION.into(),
        seed: config.seed,
        denoiser: ctx.denoiser.as_ref().map_or(DenoiserKind::Oracle, Denoiser::kind),
        config: config.clone(),
        settings,
        samples,
        timings: Timings {
            setup_seconds: setup,
            estimation_seconds: estimation,
            estimates: jobs.len() * n_snr,
        },
    })
}

/// NMSE-versus-SNR sweep over every configured pilot ratio.
pub fn run_sweep(config: &ExperimentConfig) -> Result<EstimationReport> {
    run_report(config, None, ReportMode::Sweep)
}

/// [`run_sweep`] with an in-memory denoiser in place of the configured one.
pub fn run_sweep_with(config: &ExperimentConfig, denoiser: &Denoiser) -> Result<EstimationReport> {
    run_report(config, Some(denoiser), ReportMode::Sweep)
}

/// Per-iteration NMSE evolution; same estimates as a sweep, labeled as a trace.
pub fn run_iteration_trace(config: &ExperimentConfig) -> Result<EstimationReport> {
    run_report(config, None, ReportMode::Trace)
}

pub fn run_iteration_trace_with(config: &ExperimentConfig, denoiser: &Denoiser) -> Result<EstimationReport> {
    run_report(config, Some(denoiser), ReportMode::Trace)
}

/// Estimates a single channel (first pilot ratio and SNR of the config).
pub fn estimate_one(config: &ExperimentConfig, sample: usize, denoiser: Option<&Denoiser>) -> Result<Estimate> {
    let mut single = config.clone();
    single.n_samples = sample + 1;
    single.pilots.alphas.truncate(1);
    single.snr_db.truncate(1);
    let ctx = Context::new(&single, denoiser)?;
    Ok(ctx.run_sample(0, sample)?.remove(0))
}

/// Dataset described by the `data` section: CSV path groups when given,
/// otherwise seeded synthetic channels.
pub fn generate_dataset(config: &ExperimentConfig) -> Result<ChannelDataset> {
    let (tx, rx) = (config.arrays.tx, config.arrays.rx);
    match &config.data.csv {
        Some(path) => ChannelDataset::from_path_groups(tx, rx, &load_path_file(path)?),
        None => ChannelDataset::synthetic(
            &mut rng_from(config.seed, &[STREAM_DATA]),
            tx,
            rx,
            &config.data.sampler,
            config.data.count,
            "syn",
        ),
    }
}

/// Trains a consistency model per the `training` section. The first
/// `train_samples` channels train, the remainder is held out.
pub fn train_from_config(config: &ExperimentConfig) -> Result<(ConsistencyModel, LossTrace)> {
    let data = match &config.training.dataset {
        Some(p) => ChannelDataset::load(p)?,
        None => generate_dataset(config)?,
    };
    let split = config.training.train_samples.min(data.len());
    if split == 0 {
        return Err(Error::InvalidConfig("no training samples".into()));
    }
    let (train_set, test_set) = data.samples.split_at(split);
    let options = TrainOptions {
        eval_every: config.training.eval_every,
        eval_samples: config.training.eval_samples,
        ..TrainOptions::default()
    };
    let test = (!test_set.is_empty()).then_some(test_set);
    train(
        train_set,
        test,
        &config.training.cm,
        &options,
        &mut rng_from(config.seed, &[STREAM_TRAIN]),
    )
}

/// Held-out validation observations for one SNR. Channels come from a stream
/// disjoint from the evaluation channels, or from the tail of a dataset.
pub fn validation_cases(config: &ExperimentConfig, snr_db: f64) -> Result<Vec<ValidationCase>> {
    let mut cfg = config.clone();
    cfg.pilots.alphas = vec![config.tuning.alpha];
    cfg.n_samples = 1;
    let ctx = Context::new(&cfg, Some(&Denoiser::Identity))?;
    let n = config.tuning.n_validation;
    let channels: Vec<ChannelSample> = match &ctx.channels {
        Channels::Synthetic(sampler) => (0..n)
            .map(|i| synthetic_channel(config, sampler, STREAM_VALIDATION, i))
            .collect::<Result<_>>()?,
        Channels::Dataset(data) => {
            let start = data.len().saturating_sub(n);
            data.samples[start..].to_vec()
        }
    };
    let snr_index = snr_key_index(snr_db);
    channels
        .iter()
        .enumerate()
        .map(|(i, ch)| {
            let truth = ch.angular_vec();
            let path = [STREAM_VALIDATION, i as u64];
            let (n_t, n_r) = (cfg.arrays.tx.size(), cfg.arrays.rx.size());
            let (x_p, w_rf) = generate_codebooks(
                &mut rng_from(config.seed, &[path[0], path[1], STREAM_CODEBOOK]),
                &ctx.pilots[0],
                n_t,
                n_r,
            )?;
            let op = assemble_operator(&x_p, &w_rf, &ctx.f_t, &ctx.f_r)?;
            let obs = observe(
                &op,
                &truth,
                snr_db,
                &mut rng_from(config.seed, &[path[0], path[1], STREAM_NOISE, snr_index]),
            )?;
            Ok(ValidationCase {
                y: obs.y_vec(),
                op,
                truth,
                seed: derive_seed(config.seed, &[path[0], path[1], STREAM_ACTIVE, snr_index]),
            })
        })
        .collect()
}

fn snr_key_index(snr_db: f64) -> u64 {
    snr_db.to_bits()
}

/// Grid-searches a schedule for every configured SNR and collects the table.
pub fn tune_from_config(config: &ExperimentConfig, denoiser: &Denoiser) -> Result<(ScheduleTable, Vec<TuningResult>)> {
    config.validate()?;
    let mut table = ScheduleTable::default();
    let mut results = Vec::with_capacity(config.snr_db.len());
    for &snr in &config.snr_db {
        let cases = validation_cases(config, snr)?;
        let result = tune_schedule(&cases, denoiser, &config.tuning.grid, &config.solver)?;
        log::info!(
            "snr {}: best {:?} (mean nmse {:.2} dB)",
            snr_text(snr),
            result.best,
            to_db(result.best_nmse)
        );
        table.insert(snr, result.best);
        results.push(result);
    }
    Ok((table, results))
}
