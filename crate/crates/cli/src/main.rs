//! `pnpcm` command-line driver.
//!
//! Every subcommand reads an optional JSON experiment config, applies the
//! command-line overrides and writes its outputs below `--out`. Failures
//! print a single `error kind=<Kind> message=<json string>` line on stderr and
//! exit with status 1 (2 for usage errors).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pnpcm::cm::save_checkpoint;
use pnpcm::denoiser::{Denoiser, DenoiserKind};
use pnpcm::harness::{self, EstimationReport, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "pnpcm", version, about = "PnP consistency-model MIMO channel estimation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_kind)]
    denoiser: Option<DenoiserKind>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

fn parse_kind(s: &str) -> std::result::Result<DenoiserKind, String> {
    s.parse().map_err(|e: pnpcm::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize (or ingest from a path CSV) a channel dataset.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        /// CSV of per-path parameters to ingest instead of synthesizing.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train a consistency model; writes `cm.ckpt` and `loss.csv`.
    TrainCm {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Tune the PnP schedule per SNR; writes `schedule_table.json`.
    Tune,
    /// Estimate one channel; writes `estimate.json`.
    Estimate {
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Pilot ratio target; defaults to the first configured one.
        #[arg(long)]
        alpha: Option<f64>,
        /// SNR in dB (`inf` for noiseless); defaults to the first configured one.
        #[arg(long)]
        snr: Option<String>,
    },
    /// NMSE sweep over SNR and pilot ratio.
    Sweep,
    /// Per-iteration NMSE traces.
    Trace,
    /// Summarize a `report.json`, optionally re-emitting it.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(o) = &common.out {
        config.output_dir = o.clone();
    }
    if let Some(k) = common.denoiser {
        config.denoiser = k;
    }
    if let Some(c) = &common.checkpoint {
        config.checkpoint = Some(c.clone());
    }
    config.validate()?;
    Ok(config)
}

fn parse_snr(s: &str) -> Result<f64> {
    match s {
        "inf" | "+inf" => Ok(f64::INFINITY),
        _ => Ok(s.parse().with_context(|| format!("invalid SNR `{s}`"))?),
    }
}

fn print_summary(report: &EstimationReport) {
    println!("{} {:?} denoiser={} seed={}", report.version, report.mode, report.denoiser, report.seed);
    println!("alpha     snr_db   samples  nmse_db   trace_db");
    for s in &report.settings {
        let trace: Vec<String> = s.mean_trace_db.iter().map(|v| format!("{v:.2}")).collect();
        let snr = if s.snr_db.is_infinite() { "inf".to_string() } else { format!("{}", s.snr_db) };
        println!(
            "{:<9.4} {:<8} {:<8} {:<9.3} [{}]",
            s.alpha,
            snr,
            s.n_samples,
            s.mean_nmse_db,
            trace.join(", ")
        );
    }
}

fn write_outputs(report: &EstimationReport, dir: &Path) -> Result<()> {
    let paths = report.emit(dir)?;
    for p in paths {
        log::info!("wrote {}", p.display());
    }
    print_summary(report);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli.common)?;
    let out = config.output_dir.clone();
    match cli.command {
        Command::GenData { count, csv } => {
            if let Some(c) = count {
                config.data.count = c;
            }
            if csv.is_some() {
                config.data.csv = csv;
            }
            let data = harness::generate_dataset(&config)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("channels.bin");
            data.save(&path)?;
            println!("wrote {} channels to {}", data.len(), path.display());
        }
        Command::TrainCm { dataset, steps } => {
            if dataset.is_some() {
                config.training.dataset = dataset;
            }
            if let Some(s) = steps {
                config.training.cm.steps = s;
            }
            let (model, trace) = harness::train_from_config(&config)?;
            std::fs::create_dir_all(&out)?;
            save_checkpoint(&model, out.join("cm.ckpt"))?;
            trace.save_csv(out.join("loss.csv"))?;
            println!(
                "trained {} steps: loss {:.4e} -> {:.4e}, checkpoint {}",
                config.training.cm.steps,
                trace.head_mean(10),
                trace.tail_mean(100),
                out.join("cm.ckpt").display()
            );
        }
        Command::Tune => {
            let denoiser = match harness::resolve_denoiser(&config)? {
                Some(d) => d,
                None => bail!("the oracle denoiser cannot be used for tuning"),
            };
            let (table, _) = harness::tune_from_config(&config, &denoiser)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("schedule_table.json");
            std::fs::write(&path, table.to_json()? + "\n")?;
            println!("{}", table.to_json()?);
        }
        Command::Estimate { sample, alpha, snr } => {
            if let Some(a) = alpha {
                config.pilots.alphas = vec![a];
            }
            if let Some(s) = snr {
                config.snr_db = vec![parse_snr(&s)?];
            }
            config.validate()?;
            let denoiser: Option<Denoiser> = harness::resolve_denoiser(&config)?;
            let e = harness::estimate_one(&config, sample, denoiser.as_ref())?;
            let h_hat: Vec<[f64; 2]> = e.h_hat.iter().map(|z| [z.re, z.im]).collect();
            let doc = serde_json::json!({
                "sample_id": e.sample_id,
                "alpha_target": config.pilots.alphas[0],
                "snr_db": harness::snr_serde::list::serialize(&config.snr_db[..1], serde_json::value::Serializer)?,
                "nmse": e.nmse,
                "nmse_db": harness::to_db(e.nmse),
                "shape": [config.arrays.rx.size(), config.arrays.tx.size()],
                "layout": "angular domain, column-major vec, [re, im] pairs",
                "h_hat": h_hat,
            });
            std::fs::create_dir_all(&out)?;
            let path = out.join("estimate.json");
            std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
            println!("{} nmse {:.3} dB -> {}", e.sample_id, harness::to_db(e.nmse), path.display());
        }
        Command::Sweep => write_outputs(&harness::run_sweep(&config)?, &out)?,
        Command::Trace => write_outputs(&harness::run_iteration_trace(&config)?, &out)?,
        Command::Report { input } => {
            let report = EstimationReport::load(&input).with_context(|| format!("loading {}", input.display()))?;
            if cli.common.out.is_some() {
                report.emit(&out)?;
            }
            print_summary(&report);
        }
    }
    Ok(())
}

fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<pnpcm::Error>())
        .map_or("Other", |e| e.kind());
    let message = format!("{err:#}");
    format!(
        "error kind={kind} message={}",
        serde_json::to_string(&message).unwrap_or_else(|_| "\"\"".into())
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.trim_end());
            eprintln!(
                "error kind=Usage message={}",
                serde_json::to_string(msg.lines().next().unwrap_or("")).unwrap_or_default()
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
