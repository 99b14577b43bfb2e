//! Reverse-indexed PnP-ADMM with active noising, a denoiser prior step, a
//! scaled dual update and Nesterov-type extrapolation.
//!
//! Iterations run `n = N−1, …, 0` and consume schedule entries `n + 1`, so
//! schedules are addressed 1-based throughout.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::measurement::{complex_gaussian, MeasurementOperator};
use crate::solver::{DataConsistencySolver, SolverKind};
use crate::{CVec, Error, Result};

/// Per-iteration noise levels, penalties and momenta, stored for indices
/// `1..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnpSchedule {
    t_seq: Vec<f64>,
    rho_seq: Vec<f64>,
    beta_seq: Vec<f64>,
}

impl PnpSchedule {
    /// Sequences are given in index order `1, 2, …, N`.
    pub fn new(t_seq: Vec<f64>, rho_seq: Vec<f64>, beta_seq: Vec<f64>) -> Result<Self> {
        let n = t_seq.len();
        if n == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one iteration".into()));
        }
        if rho_seq.len() != n || beta_seq.len() != n {
            return Err(Error::InvalidConfig(format!(
                "schedule lengths differ: t {n}, rho {}, beta {}",
                rho_seq.len(),
                beta_seq.len()
            )));
        }
        if t_seq.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::InvalidConfig("noise levels must be finite and non-negative".into()));
        }
        if rho_seq.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidConfig("penalties must be finite and positive".into()));
        }
        if beta_seq.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::InvalidConfig("momenta must be finite and non-negative".into()));
        }
        Ok(Self {
            t_seq,
            rho_seq,
            beta_seq,
        })
    }

    pub fn constant(n_iters: usize, t: f64, rho: f64, beta: f64) -> Result<Self> {
        Self::new(vec![t; n_iters], vec![rho; n_iters], vec![beta; n_iters])
    }

    pub fn n_iters(&self) -> usize {
        self.t_seq.len()
    }

    /// `t_n` for `1 ≤ n ≤ N`.
    pub fn t(&self, n: usize) -> f64 {
        self.t_seq[n - 1]
    }

    pub fn rho(&self, n: usize) -> f64 {
        self.rho_seq[n - 1]
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.beta_seq[n - 1]
    }

    pub fn t_seq(&self) -> &[f64] {
        &self.t_seq
    }

    pub fn rho_seq(&self) -> &[f64] {
        &self.rho_seq
    }

    pub fn beta_seq(&self) -> &[f64] {
        &self.beta_seq
    }
}

/// One outer iteration's diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Reverse index `n` of the produced iterate `x_n`.
    pub n: usize,
    /// Linear NMSE of `x_n` when the truth was supplied.
    pub nmse: Option<f64>,
    pub cg_iters: usize,
    pub cg_residual: f64,
    /// `‖z_n − x_n‖`.
    pub dual_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpState {
    pub x: CVec,
    pub z: CVec,
    pub u: CVec,
    pub x_hat: CVec,
    pub u_hat: CVec,
    /// Reverse index of the most recent iterate.
    pub n: usize,
    /// Records in execution order (`n = N−1` first).
    pub trace: Vec<IterationRecord>,
}

impl PnpState {
    fn zeros(len: usize, n: usize) -> Self {
        let z = CVec::zeros(len);
        Self {
            x: z.clone(),
            z: z.clone(),
            u: z.clone(),
            x_hat: z.clone(),
            u_hat: z,
            n,
            trace: Vec::with_capacity(n),
        }
    }

    /// NMSE trace in execution order; empty when no truth was supplied.
    pub fn nmse_trace(&self) -> Vec<f64> {
        self.trace.iter().filter_map(|r| r.nmse).collect()
    }
}

fn nmse_against(x: &CVec, truth: &CVec) -> f64 {
    (x - truth).norm_squared() / truth.norm_squared()
}

fn finite(v: &CVec) -> bool {
    v.iter().all(|c| c.re.is_finite() && c.im.is_finite())
}

/// Runs the PnP iterations and returns `x_0` together with the final state.
///
/// `truth` only feeds the NMSE trace; it never influences the iterates.
#[allow(clippy::too_many_arguments)]
pub fn run<R: Rng + ?Sized>(
    op: &MeasurementOperator,
    y: &CVec,
    denoiser: &Denoiser,
    schedule: &PnpSchedule,
    solver: &SolverKind,
    rng: &mut R,
    truth: Option<&CVec>,
) -> Result<(CVec, PnpState)> {
    let dc = DataConsistencySolver::new(solver, op);
    run_with_solver(op, y, denoiser, schedule, &dc, rng, truth)
}

/// [`run`] with a solver that has already been bound to `op`.
#[allow(clippy::too_many_arguments)]
pub fn run_with_solver<R: Rng + ?Sized>(
    op: &MeasurementOperator,
    y: &CVec,
    denoiser: &Denoiser,
    schedule: &PnpSchedule,
    dc: &DataConsistencySolver,
    rng: &mut R,
    truth: Option<&CVec>,
) -> Result<(CVec, PnpState)> {
    let len = op.cols();
    crate::error::check_dims("pnp: observation", op.rows(), y.len())?;
    if let Some(h) = truth {
        crate::error::check_dims("pnp: truth", len, h.len())?;
        if h.norm_squared() == 0.0 {
            return Err(Error::ZeroTruth);
        }
    }
    let big_n = schedule.n_iters();
    let aty = op.adjoint_apply(y)?;
    let mut st = PnpState::zeros(len, big_n);
    let mut warm: Option<CVec> = None;

    for n in (0..big_n).rev() {
        let (t, rho, beta) = (schedule.t(n + 1), schedule.rho(n + 1), schedule.beta(n + 1));
        let rhs = &aty + (&st.x_hat - &st.u_hat) * Complex64::from(rho);
        let out = dc.solve(op, rho, &rhs, warm.as_ref())?;
        let z = out.z;
        let mut nu = &z + &st.u_hat;
        if t > 0.0 {
            nu += complex_gaussian(rng, len, t * t);
        }
        let x = denoiser.denoise(&nu, t)?;
        if x.len() != len {
            return Err(Error::ShapeMismatch {
                expected: format!("{len} entries"),
                found: format!("{} entries", x.len()),
            });
        }
        let u = &st.u_hat + &z - &x;
        let b = Complex64::from(beta);
        let x_hat = &x + (&x - &st.x) * b;
        let u_hat = &u + (&u - &st.u) * b;
        if !(finite(&z) && finite(&x) && finite(&u) && finite(&x_hat) && finite(&u_hat)) {
            return Err(Error::NonFiniteState { iteration: n });
        }
        let record = IterationRecord {
            n,
            nmse: truth.map(|h| nmse_against(&x, h)),
            cg_iters: out.iters,
            cg_residual: out.residual,
            dual_residual: (&z - &x).norm(),
        };
        warm = Some(z.clone());
        st.trace.push(record);
        st.z = z;
        st.x = x;
        st.u = u;
        st.x_hat = x_hat;
        st.u_hat = u_hat;
        st.n = n;
    }
    Ok((st.x.clone(), st))
}

/// Tuned parameters for one SNR. Noise levels are in raw channel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub t_hi: f64,
    pub t_lo: f64,
    pub rho: f64,
    pub beta: f64,
    pub n_iters: usize,
}

impl ScheduleParams {
    /// Geometric noise levels from `t_hi` down to `t_lo` over `n_iters`
    /// iterations, constant penalty and momentum. Index 1 (the last
    /// iteration executed) gets `t_lo`. `t_hi = t_lo = 0` gives a noise-free
    /// schedule.
    pub fn schedule(&self, n_iters: usize) -> Result<PnpSchedule> {
        if n_iters == 0 {
            return Err(Error::InvalidConfig("n_iters must be at least 1".into()));
        }
        if self.t_hi == 0.0 && self.t_lo == 0.0 {
            return PnpSchedule::new(vec![0.0; n_iters], vec![self.rho; n_iters], vec![self.beta; n_iters]);
        }
        if !(self.t_hi > 0.0 && self.t_lo > 0.0 && self.t_lo <= self.t_hi) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < t_lo <= t_hi, got {} and {}",
                self.t_lo, self.t_hi
            )));
        }
        let mut t_seq: Vec<f64> = (0..n_iters)
            .map(|i| {
                if n_iters == 1 {
                    self.t_hi
                } else {
                    let frac = i as f64 / (n_iters - 1) as f64;
                    self.t_lo * (self.t_hi / self.t_lo).powf(frac)
                }
            })
            .collect();
        // Index 1 is the smallest level; index N starts the reverse sweep.
        if n_iters > 1 {
            t_seq[0] = self.t_lo;
            t_seq[n_iters - 1] = self.t_hi;
        }
        PnpSchedule::new(t_seq, vec![self.rho; n_iters], vec![self.beta; n_iters])
    }
}

/// SNR-indexed schedule table; keys are dB values rendered as strings, with
/// `"inf"` for noiseless observations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTable {
    #[serde(flatten)]
    pub entries: BTreeMap<String, ScheduleParams>,
}

/// String key used for an SNR in a [`ScheduleTable`].
pub fn snr_key(snr_db: f64) -> String {
    if snr_db == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{snr_db}")
    }
}

fn parse_snr_key(key: &str) -> Result<f64> {
    if key == "inf" {
        return Ok(f64::INFINITY);
    }
    key.parse::<f64>()
        .map_err(|_| Error::InvalidConfig(format!("schedule key `{key}` is not an SNR")))
}

impl ScheduleTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text)?;
        for key in table.entries.keys() {
            parse_snr_key(key)?;
        }
        Ok(table)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn insert(&mut self, snr_db: f64, params: ScheduleParams) {
        self.entries.insert(snr_key(snr_db), params);
    }

    /// Entry for the nearest tabulated SNR (ties go to the higher SNR).
    /// Infinite SNR uses an `"inf"` entry when present, else the highest.
    pub fn lookup(&self, snr_db: f64) -> Result<ScheduleParams> {
        let mut best: Option<(f64, f64, ScheduleParams)> = None;
        for (key, params) in &self.entries {
            let s = parse_snr_key(key)?;
            let dist = if s == snr_db {
                0.0
            } else if snr_db.is_infinite() || s.is_infinite() {
                f64::INFINITY
            } else {
                (s - snr_db).abs()
            };
            let better = match &best {
                None => true,
                Some((d, bs, _)) => dist < *d || (dist == *d && (s > *bs)),
            };
            if better {
                best = Some((dist, s, *params));
            }
        }
        best.map(|(_, _, p)| p)
            .ok_or_else(|| Error::InvalidConfig("schedule table is empty".into()))
    }
}

/// Table shipped with the crate, tuned on a held-out synthetic validation set.
pub const SHIPPED_TABLE: &str = include_str!("../data/schedule_table.json");

pub fn shipped_table() -> ScheduleTable {
    ScheduleTable::from_json(SHIPPED_TABLE).expect("shipped schedule table parses")
}

/// Schedule for `snr_db` from the shipped table.
pub fn default_schedule(snr_db: f64, n_iters: usize) -> Result<PnpSchedule> {
    shipped_table().lookup(snr_db)?.schedule(n_iters)
}

/// Candidate values searched by [`tune_schedule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleGrid {
    pub t_hi: Vec<f64>,
    pub t_lo: Vec<f64>,
    pub rho: Vec<f64>,
    pub beta: Vec<f64>,
    pub n_iters: usize,
}

impl ScheduleGrid {
    pub fn points(&self) -> Vec<ScheduleParams> {
        let mut out = Vec::new();
        for &t_hi in &self.t_hi {
            for &t_lo in &self.t_lo {
                if t_lo > t_hi {
                    continue;
                }
                for &rho in &self.rho {
                    for &beta in &self.beta {
                        out.push(ScheduleParams {
                            t_hi,
                            t_lo,
                            rho,
                            beta,
                            n_iters: self.n_iters,
                        });
                    }
                }
            }
        }
        out
    }
}

/// One held-out observation with its ground truth.
#[derive(Debug, Clone)]
pub struct ValidationCase {
    pub op: MeasurementOperator,
    pub y: CVec,
    pub truth: CVec,
    /// Seed for the active-noise draws of this case.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub params: ScheduleParams,
    /// Mean linear NMSE after the last iteration.
    pub nmse: f64,
    /// Whether the mean NMSE never rose from one iteration to the next.
    pub non_increasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub best: ScheduleParams,
    pub best_nmse: f64,
    /// Every grid point, in grid order.
    pub scores: Vec<GridScore>,
}

/// Mean linear NMSE after each iteration (execution order) over the
/// validation cases.
pub fn score_trace(
    cases: &[ValidationCase],
    denoiser: &Denoiser,
    params: &ScheduleParams,
    solver: &SolverKind,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    if cases.is_empty() {
        return Err(Error::EmptyValidationSet);
    }
    let schedule = params.schedule(params.n_iters)?;
    let traces: Vec<Result<Vec<f64>>> = cases
        .par_iter()
        .map(|case| {
            let mut rng = crate::rng::seeded(case.seed);
            let (_, st) = run(&case.op, &case.y, denoiser, &schedule, solver, &mut rng, Some(&case.truth))?;
            Ok(st.trace.iter().map(|r| r.nmse.unwrap_or(f64::NAN)).collect())
        })
        .collect();
    let mut mean = vec![0.0; params.n_iters];
    for t in traces {
        for (m, v) in mean.iter_mut().zip(t?) {
            *m += v;
        }
    }
    Ok(mean.into_iter().map(|m| m / cases.len() as f64).collect())
}

/// Mean final NMSE of `params` over the validation cases.
pub fn score_schedule(
    cases: &[ValidationCase],
    denoiser: &Denoiser,
    params: &ScheduleParams,
    solver: &SolverKind,
) -> Result<f64> {
    let trace = score_trace(cases, denoiser, params, solver)?;
    Ok(*trace.last().expect("n_iters >= 1"))
}

/// Selection order used by [`tune_schedule`].
fn beats(a: &GridScore, b: &GridScore) -> bool {
    if a.non_increasing != b.non_increasing {
        return a.non_increasing;
    }
    a.nmse < b.nmse || (a.nmse == b.nmse && a.params.rho < b.params.rho)
}

/// Exhaustive grid search minimizing mean final NMSE.
///
/// Points whose mean trace never increases are preferred over all others, so
/// the chosen schedule keeps improving with every iteration whenever the grid
/// allows it. Remaining ties go to the smaller penalty, then to the earlier
/// grid point.
pub fn tune_schedule(
    cases: &[ValidationCase],
    denoiser: &Denoiser,
    grid: &ScheduleGrid,
    solver: &SolverKind,
) -> Result<TuningResult> {
    if cases.is_empty() {
        return Err(Error::EmptyValidationSet);
    }
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::InvalidConfig("schedule grid is empty".into()));
    }
    let mut scores: Vec<GridScore> = Vec::with_capacity(points.len());
    let mut best: Option<GridScore> = None;
    for p in points {
        let trace = score_trace(cases, denoiser, &p, solver)?;
        let score = GridScore {
            params: p,
            nmse: *trace.last().expect("n_iters >= 1"),
            non_increasing: trace.windows(2).all(|w| w[1] <= w[0]),
        };
        log::debug!("grid point {p:?}: mean trace {trace:?}");
        if best.as_ref().is_none_or(|b| beats(&score, b)) {
            best = Some(score);
        }
        scores.push(score);
    }
    let best = best.expect("non-empty grid");
    Ok(TuningResult {
        best: best.params,
        best_nmse: best.nmse,
        scores,
    })
}
