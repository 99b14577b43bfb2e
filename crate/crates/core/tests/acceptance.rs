//! Acceptance suite. Each test prints one `criterion N ...: PASS|FAIL` line to
//! the real stdout (bypassing libtest capture) before asserting.
//!
//! Criteria 4 to 7 and 10 share one desk-scale training run, performed once
//! per test process with the seed and settings from `configs/desk.json`.

use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use pnpcm::channel::{build_dictionary, ArrayGeometry};
use pnpcm::cm::{
    batch_loss_fixed_target, consistency_targets, denoising_mse, evaluate_loss, noise_grid, save_checkpoint,
    training_tensors, Act, CmConfig, ConsistencyModel, LossTrace, ParamSet, TrainingBatch,
};
use pnpcm::denoiser::{Denoiser, DenoiserKind};
use pnpcm::harness::{self, ChannelSource, ExperimentConfig, ScheduleSource};
use pnpcm::measurement::{assemble_operator, complex_gaussian, generate_codebooks, search_pilot_config, PilotConfig};
use pnpcm::pnp::ScheduleParams;
use pnpcm::rng::seeded;
use pnpcm::solver::{solve_regularized_normal, CgSettings, SolverKind};
use pnpcm::CMat;
use rand::Rng;

const DESK: &str = include_str!("../../../configs/desk.json");

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_json(DESK).expect("desk config parses")
}

fn report(criterion: u32, name: &str, pass: bool, detail: String) {
    let line = format!(
        "criterion {criterion} [{name}]: {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    // One write per line keeps concurrent tests from interleaving mid-line.
    static LOCK: Mutex<()> = Mutex::new(());
    let _g = LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let mut out = std::io::stdout();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

struct Trained {
    model: ConsistencyModel,
    trace: LossTrace,
    seconds: f64,
    boundary_before: f64,
}

/// Largest `|f(x, ε) − x|` over 100 random inputs, for both weight sets.
fn boundary_error(model: &ConsistencyModel) -> f64 {
    let (n_r, n_t) = model.shape();
    let eps = model.config().epsilon;
    let mut rng = seeded(404);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let sd = [0.02, 0.5, 3.0][i % 3];
        let data: Vec<f64> = (0..2 * n_r * n_t).map(|_| sd * rng.random_range(-1.0..1.0)).collect();
        let x = Act::from_vec(2, n_r, n_t, data);
        for set in [ParamSet::Online, ParamSet::Ema] {
            let y = model.forward_with(set, &x, eps).unwrap();
            let e = y.data.iter().zip(&x.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(e);
        }
    }
    worst
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let config = desk_config();
        let data = harness::generate_dataset(&config).unwrap();
        let (geom_t, geom_r) = (config.arrays.tx, config.arrays.rx);
        let sigma = config.training.cm.sigma_data;
        let scale = pnpcm::cm::normalization_scale(&data.samples[..config.training.train_samples], sigma).unwrap();
        let fresh = ConsistencyModel::new(&config.training.cm, geom_r.size(), geom_t.size(), scale, &mut seeded(1)).unwrap();
        let boundary_before = boundary_error(&fresh);
        let t0 = Instant::now();
        let (model, trace) = harness::train_from_config(&config).unwrap();
        Trained {
            model,
            trace,
            seconds: t0.elapsed().as_secs_f64(),
            boundary_before,
        }
    })
}

fn trained_denoiser() -> &'static Denoiser {
    static CELL: OnceLock<Denoiser> = OnceLock::new();
    CELL.get_or_init(|| Denoiser::cm(trained().model.clone()))
}

/// Dense `L ⊗ R` built entry by entry.
fn dense_kron(l: &CMat, r: &CMat) -> CMat {
    let (mt, nt) = l.shape();
    let (mr, nr) = r.shape();
    DMatrix::from_fn(mt * mr, nt * nr, |row, col| l[(row / mr, col / nr)] * r[(row % mr, col % nr)])
}

fn random_operator(rng: &mut impl Rng) -> pnpcm::measurement::MeasurementOperator {
    // N = N_t N_r ≤ 64
    loop {
        let gt = ArrayGeometry::new(rng.random_range(1..=4), rng.random_range(1..=4));
        let gr = ArrayGeometry::new(rng.random_range(1..=4), rng.random_range(1..=2));
        let (nt, nr) = (gt.size(), gr.size());
        if nt * nr > 64 {
            continue;
        }
        let cfg = PilotConfig::new(rng.random_range(1..=nt), rng.random_range(1..=nr));
        let (x_p, w) = generate_codebooks(rng, &cfg, nt, nr).unwrap();
        let f_t = build_dictionary(&gt).unwrap();
        let f_r = build_dictionary(&gr).unwrap();
        return assemble_operator(&x_p, &w, &f_t, &f_r).unwrap();
    }
}

#[test]
fn criterion_01_kronecker_and_adjoint() {
    let t0 = Instant::now();
    let mut rng = seeded(1001);
    let (mut worst_apply, mut worst_adj): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let op = random_operator(&mut rng);
        let a = dense_kron(op.left_factor(), op.right_factor());
        let h = complex_gaussian(&mut rng, op.cols(), 1.0);
        let v = complex_gaussian(&mut rng, op.rows(), 1.0);
        let diff = op.apply(&h).unwrap() - &a * &h;
        worst_apply = worst_apply.max(diff.iter().map(|z| z.norm()).fold(0.0, f64::max));
        let lhs = op.apply(&h).unwrap().dotc(&v);
        let rhs = h.dotc(&op.adjoint_apply(&v).unwrap());
        worst_adj = worst_adj.max((lhs - rhs).norm() / lhs.norm().max(rhs.norm()).max(f64::MIN_POSITIVE));
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst_apply <= 1e-10 && worst_adj <= 1e-10 && secs < 10.0;
    report(
        1,
        "Kronecker/adjoint",
        pass,
        format!("max|apply-dense|={worst_apply:.2e} adjoint rel={worst_adj:.2e} time={secs:.2}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_02_cg_vs_dense_solve() {
    let t0 = Instant::now();
    let mut rng = seeded(1002);
    let settings = CgSettings {
        max_iters: 1000,
        tolerance: 1e-10,
        initial_guess: None,
    };
    let mut worst: f64 = 0.0;
    // Contract: the reported residual is the true relative residual (up to
    // round-off) and meets the tolerance unless the iteration cap was hit.
    let mut contract = true;
    for k in 0..20 {
        let rho = [1e-3, 1.0, 10.0][k % 3];
        let op = random_operator(&mut rng);
        let a = dense_kron(op.left_factor(), op.right_factor());
        let n = op.cols();
        let g = a.adjoint() * &a + CMat::identity(n, n) * Complex64::from(rho);
        let b = complex_gaussian(&mut rng, n, 1.0);
        let exact = g.clone().cholesky().expect("Hermitian positive definite").solve(&b);
        let out = solve_regularized_normal(&op, rho, &b, &settings).unwrap();
        worst = worst.max((&out.z - &exact).norm() / exact.norm());
        let recomputed = (&g * &out.z - &b).norm() / b.norm();
        contract &= (out.residual <= settings.tolerance || out.iters == settings.max_iters)
            && (recomputed - out.residual).abs() <= 1e-12;
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-6 && contract && secs < 10.0;
    report(
        2,
        "CG vs dense Hermitian solve",
        pass,
        format!("max rel err={worst:.2e} residual contract={contract} time={secs:.2}s"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_noiseless_invertibility() {
    let t0 = Instant::now();
    let config = ExperimentConfig {
        pilots: pnpcm::harness::PilotSettings {
            alphas: vec![1.0],
            ..desk_config().pilots
        },
        snr_db: vec![f64::INFINITY],
        n_samples: 20,
        denoiser: DenoiserKind::Identity,
        checkpoint: None,
        schedule: ScheduleSource::Fixed {
            params: ScheduleParams {
                t_hi: 0.0,
                t_lo: 0.0,
                rho: 1e-9,
                beta: 0.0,
                n_iters: 4,
            },
        },
        solver: SolverKind::KroneckerEigen,
        ..desk_config()
    };
    let r = harness::run_sweep(&config).unwrap();
    let worst = r.samples.iter().map(|s| s.nmse_db).fold(f64::NEG_INFINITY, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    let pass = r.samples.len() == 20 && worst < -60.0 && secs < 120.0;
    report(
        3,
        "noiseless invertibility",
        pass,
        format!(
            "worst sample NMSE={worst:.1} dB aggregate={:.1} dB over {} samples time={secs:.1}s",
            r.settings[0].mean_nmse_db,
            r.samples.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_boundary_condition() {
    let t = trained();
    let after = boundary_error(&t.model);
    let pass = t.boundary_before <= 1e-6 && after <= 1e-6;
    report(
        4,
        "CM boundary condition",
        pass,
        format!("max|f(x,eps)-x| before={:.2e} after={after:.2e}", t.boundary_before),
    );
    assert!(pass);
}

#[test]
fn criterion_05_training_health() {
    let t = trained();
    let config = desk_config();
    let data = harness::generate_dataset(&config).unwrap();
    let split = config.training.train_samples;
    let model = &t.model;
    let train_t = training_tensors(&data.samples[..200], model.scale()).unwrap();
    let test_t = training_tensors(&data.samples[split..], model.scale()).unwrap();

    let initial = t.trace.head_mean(10);
    let last = t.trace.tail_mean(100);
    let ratio = last / initial;
    let k = model.config().s1;
    let tr = evaluate_loss(model, ParamSet::Ema, &train_t, k, 77).unwrap();
    let te = evaluate_loss(model, ParamSet::Ema, &test_t, k, 77).unwrap();
    let gap = (te - tr).abs() / tr;
    let mut beats = true;
    let mut detail = Vec::new();
    for level in [0.02, 0.05, 0.1] {
        let (m, id) = denoising_mse(model, ParamSet::Ema, &test_t, level, 91).unwrap();
        beats &= m < id;
        detail.push(format!("t={level}: {m:.2e} vs identity {id:.2e}"));
    }
    let samples_ok = split >= 2000 && model.config().steps >= 5000;
    let pass = ratio < 0.05 && gap < 0.2 && beats && samples_ok && t.seconds <= 7200.0;
    report(
        5,
        "training health",
        pass,
        format!(
            "final/initial loss={ratio:.4} ({last:.3e}/{initial:.3e}) train/test gap={gap:.3} ({tr:.3e}/{te:.3e}) {} train time={:.0}s",
            detail.join("; "),
            t.seconds
        ),
    );
    assert!(pass);
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

#[test]
fn criterion_06_nmse_vs_snr_and_pilot_ratio() {
    let d = trained_denoiser();
    let base = desk_config();
    let by_snr = ExperimentConfig {
        pilots: pnpcm::harness::PilotSettings {
            alphas: vec![1.0],
            ..base.pilots.clone()
        },
        snr_db: vec![-5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
        n_samples: 100,
        ..base.clone()
    };
    let r1 = harness::run_sweep_with(&by_snr, d).unwrap();
    let snr_curve: Vec<f64> = r1.settings.iter().map(|s| s.mean_nmse_db).collect();

    let by_alpha = ExperimentConfig {
        pilots: pnpcm::harness::PilotSettings {
            alphas: vec![0.2, 0.39, 0.59, 0.78, 1.0],
            ..base.pilots.clone()
        },
        snr_db: vec![20.0],
        n_samples: 100,
        ..base
    };
    let r2 = harness::run_sweep_with(&by_alpha, d).unwrap();
    let alpha_curve: Vec<f64> = r2.settings.iter().map(|s| s.mean_nmse_db).collect();
    let ratios: Vec<String> = r2.settings.iter().map(|s| format!("{:.3}", s.alpha)).collect();

    let pass = strictly_decreasing(&snr_curve) && strictly_decreasing(&alpha_curve);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ");
    report(
        6,
        "NMSE vs SNR and pilot ratio",
        pass,
        format!(
            "SNR -5..20 dB at alpha=1: [{}] dB; alpha [{}] at 20 dB: [{}] dB",
            fmt(&snr_curve),
            ratios.join(", "),
            fmt(&alpha_curve)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_07_iteration_traces() {
    let d = trained_denoiser();
    let base = desk_config();
    let config = ExperimentConfig {
        pilots: pnpcm::harness::PilotSettings {
            alphas: vec![1.0],
            ..base.pilots.clone()
        },
        snr_db: vec![-5.0, 20.0],
        n_samples: 100,
        n_iters: 4,
        ..base
    };
    let r = harness::run_iteration_trace_with(&config, d).unwrap();
    let low = &r.settings[0].mean_trace_db;
    let high = &r.settings[1].mean_trace_db;
    // Gain is measured from the zero initialization (NMSE 1, i.e. 0 dB).
    let total = -high[3];
    let early = -high[1];
    let share = early / total;
    let pass = low.len() == 4 && non_increasing(low) && non_increasing(high) && total > 0.0 && share >= 0.6;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ");
    report(
        7,
        "iteration traces",
        pass,
        format!(
            "-5 dB: [{}] dB; 20 dB: [{}] dB; share of gain in first 2 iterations={share:.3}",
            fmt(low),
            fmt(high)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_pilot_search() {
    let targets = [0.78, 0.59, 0.39, 0.20];
    let expected = [798usize, 600, 400, 203];
    let got: Vec<usize> = targets
        .iter()
        .map(|&a| search_pilot_config(a, 64, 16, 1).unwrap().measurements())
        .collect();
    let pass = got == expected;
    let ratios: Vec<String> = got.iter().map(|m| format!("{m}/1024={:.3}", *m as f64 / 1024.0)).collect();
    report(8, "pilot-config search", pass, ratios.join(", "));
    assert!(pass);
}

#[test]
fn criterion_09_gradient_check() {
    let config = CmConfig::desk();
    let model = ConsistencyModel::new(&config, 16, 64, 0.046, &mut seeded(9)).unwrap();
    let params: Vec<f64> = model.params(ParamSet::Online).iter().map(|&p| p as f64).collect();
    let mut rng = seeded(99);
    let data: Vec<Vec<f32>> = (0..4)
        .map(|_| (0..2 * 16 * 64).map(|_| rng.random_range(-0.05f32..0.05)).collect())
        .collect();
    let grid = noise_grid(&config, 40);
    let batch = TrainingBatch::draw(&data, &grid, 4, &mut rng);
    let targets = consistency_targets(&model, &params, &batch);
    let (_, grad) = batch_loss_fixed_target(&model, &params, &batch, &targets, true);
    let grad = grad.unwrap();
    let loss = |p: &[f64]| batch_loss_fixed_target(&model, p, &batch, &targets, false).0;

    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let dir: Vec<f64> = (0..params.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir: Vec<f64> = dir.iter().map(|v| v / norm).collect();
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let h = 1e-5;
        let plus: Vec<f64> = params.iter().zip(&dir).map(|(p, d)| p + h * d).collect();
        let minus: Vec<f64> = params.iter().zip(&dir).map(|(p, d)| p - h * d).collect();
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()));
    }
    let pass = worst <= 1e-3;
    report(9, "gradient check", pass, format!("max relative error over 10 directions={worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_10_sweep_determinism() {
    let model = &trained().model;
    let dir = tempfile::tempdir().unwrap();
    let ckpt: PathBuf = dir.path().join("cm.ckpt");
    save_checkpoint(model, &ckpt).unwrap();
    let base = desk_config();
    let config = ExperimentConfig {
        pilots: pnpcm::harness::PilotSettings {
            alphas: vec![1.0, 0.39],
            ..base.pilots.clone()
        },
        snr_db: vec![0.0, 20.0],
        n_samples: 12,
        checkpoint: Some(ckpt),
        channels: ChannelSource::default(),
        ..base
    };
    let a = harness::run_sweep(&config).unwrap();
    let b = harness::run_sweep(&config).unwrap();
    let pa = a.emit(dir.path().join("a")).unwrap();
    let pb = b.emit(dir.path().join("b")).unwrap();
    let same_csv = std::fs::read(&pa[0]).unwrap() == std::fs::read(&pb[0]).unwrap();
    let same_json = std::fs::read(&pa[1]).unwrap() == std::fs::read(&pb[1]).unwrap();
    let pass = same_csv && same_json;
    report(
        10,
        "sweep determinism",
        pass,
        format!("report.csv identical={same_csv} report.json identical={same_json}"),
    );
    assert!(pass);
}
