//! Data-consistency solves for `(A^H A + ρI) z = b`.
//!
//! The default path is matrix-free conjugate gradient on the regularized
//! normal operator, with real CG scalars taken from the Hermitian inner
//! product. [`KroneckerEigenSolver`] is an exact alternative that
//! diagonalizes `A^H A = (L^H L) ⊗ (R^H R)` through the eigenbases of the two
//! small Gram factors; it is used where CG cannot resolve the smallest
//! singular directions of a square random-phase operator.

use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::check_dims;
use crate::measurement::MeasurementOperator;
use crate::{CMat, CVec, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgSettings {
    pub max_iters: usize,
    /// Relative residual threshold `‖(A^H A + ρI) z − b‖ / ‖b‖`.
    pub tolerance: f64,
    #[serde(skip)]
    pub initial_guess: Option<CVec>,
}

impl Default for CgSettings {
    fn default() -> Self {
        Self {
            max_iters: 80,
            tolerance: 1e-6,
            initial_guess: None,
        }
    }
}

impl CgSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("CG max_iters must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig("CG tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn with_initial_guess(mut self, guess: CVec) -> Self {
        self.initial_guess = Some(guess);
        self
    }
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub z: CVec,
    pub iters: usize,
    /// Relative residual of the returned iterate, recomputed explicitly.
    pub residual: f64,
}

fn inner(a: &CVec, b: &CVec) -> Complex64 {
    a.dotc(b)
}

/// `‖(A^H A + ρI) z − b‖ / ‖b‖` (or the absolute residual when `b = 0`).
pub fn relative_residual(op: &MeasurementOperator, rho: f64, z: &CVec, b: &CVec) -> Result<f64> {
    let r = op.normal_apply(z, rho)? - b;
    let nb = b.norm();
    Ok(if nb > 0.0 { r.norm() / nb } else { r.norm() })
}

/// Solves `(A^H A + ρI) z = b` by conjugate gradient.
///
/// Returns the iterate with the smallest recursive residual seen, which is
/// the final one whenever the tolerance is met.
pub fn solve_regularized_normal(
    op: &MeasurementOperator,
    rho: f64,
    b: &CVec,
    settings: &CgSettings,
) -> Result<CgOutcome> {
    solve_regularized_normal_traced(op, rho, b, settings, |_, _| {})
}

/// [`solve_regularized_normal`] with a callback invoked with `(k, z_k)` for
/// the initial iterate and after every CG step.
pub fn solve_regularized_normal_traced<F>(
    op: &MeasurementOperator,
    rho: f64,
    b: &CVec,
    settings: &CgSettings,
    mut observer: F,
) -> Result<CgOutcome>
where
    F: FnMut(usize, &CVec),
{
    settings.validate()?;
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidConfig(format!("rho must be positive, got {rho}")));
    }
    let n = op.cols();
    check_dims("solve_regularized_normal", n, b.len())?;
    if b.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite { context: "CG right-hand side" });
    }

    let b_norm = b.norm();
    if b_norm == 0.0 {
        let z = CVec::zeros(n);
        observer(0, &z);
        return Ok(CgOutcome {
            z,
            iters: 0,
            residual: 0.0,
        });
    }

    let mut x = match &settings.initial_guess {
        Some(g) => {
            check_dims("CG initial guess", n, g.len())?;
            g.clone()
        }
        None => CVec::zeros(n),
    };
    observer(0, &x);
    let mut r = b - op.normal_apply(&x, rho)?;
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    let threshold = settings.tolerance * b_norm;

    let mut best = x.clone();
    let mut best_res = rs.sqrt();
    let mut iters = 0;
    while iters < settings.max_iters && rs.sqrt() > threshold {
        let ap = op.normal_apply(&p, rho)?;
        let pap = inner(&p, &ap).re;
        if !(pap.is_finite()) {
            return Err(Error::NonFinite { context: "CG curvature" });
        }
        if pap <= 0.0 {
            break;
        }
        let alpha = Complex64::from(rs / pap);
        x.axpy(alpha, &p, Complex64::from(1.0));
        r.axpy(-alpha, &ap, Complex64::from(1.0));
        let rs_new = r.norm_squared();
        if !rs_new.is_finite() {
            return Err(Error::NonFinite { context: "CG residual" });
        }
        iters += 1;
        observer(iters, &x);
        if rs_new.sqrt() < best_res {
            best_res = rs_new.sqrt();
            best.copy_from(&x);
        }
        let beta = Complex64::from(rs_new / rs);
        p.axpy(Complex64::from(1.0), &r, beta);
        rs = rs_new;
    }
    let z = if best_res < rs.sqrt() { best } else { x };
    let residual = relative_residual(op, rho, &z, b)?;
    Ok(CgOutcome { z, iters, residual })
}

/// Exact `(A^H A + ρI)^{-1}` for a Kronecker operator.
#[derive(Debug, Clone)]
pub struct KroneckerEigenSolver {
    /// Eigenvectors of `L^H L` (`N_t × N_t`).
    v_left: CMat,
    v_left_conj: CMat,
    v_left_t: CMat,
    /// Eigenvectors of `R^H R` (`N_r × N_r`).
    v_right: CMat,
    v_right_h: CMat,
    lambda_left: Vec<f64>,
    lambda_right: Vec<f64>,
}

impl KroneckerEigenSolver {
    pub fn new(op: &MeasurementOperator) -> Self {
        let left = op.left_factor();
        let right = op.right_factor();
        let gram_l = left.adjoint() * left;
        let gram_r = right.adjoint() * right;
        let el = SymmetricEigen::new(gram_l);
        let er = SymmetricEigen::new(gram_r);
        // Gram matrices are PSD; clip tiny negative round-off.
        let lambda_left = el.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
        let lambda_right = er.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
        let v_left = el.eigenvectors;
        let v_right = er.eigenvectors;
        Self {
            v_left_conj: v_left.conjugate(),
            v_left_t: v_left.transpose(),
            v_right_h: v_right.adjoint(),
            v_left,
            v_right,
            lambda_left,
            lambda_right,
        }
    }

    pub fn solve(&self, rho: f64, b: &CVec) -> Result<CVec> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidConfig(format!("rho must be positive, got {rho}")));
        }
        let (n_r, n_t) = (self.v_right.nrows(), self.v_left.nrows());
        check_dims("KroneckerEigenSolver::solve", n_r * n_t, b.len())?;
        let bm = CMat::from_column_slice(n_r, n_t, b.as_slice());
        // Coordinates in the eigenbasis V_L ⊗ V_R.
        let mut c = &self.v_right_h * bm * &self.v_left_conj;
        for j in 0..n_t {
            for i in 0..n_r {
                c[(i, j)] /= self.lambda_right[i] * self.lambda_left[j] + rho;
            }
        }
        let z = &self.v_right * c * &self.v_left_t;
        if z.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite { context: "Kronecker eigen solve" });
        }
        Ok(CVec::from_vec(z.data.into()))
    }
}

/// Linear solver used for the data-consistency step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverKind {
    Cg(CgSettings),
    KroneckerEigen,
}

impl Default for SolverKind {
    fn default() -> Self {
        SolverKind::Cg(CgSettings::default())
    }
}

/// A solver bound to one operator, ready for repeated solves.
#[derive(Debug, Clone)]
pub enum DataConsistencySolver {
    Cg(CgSettings),
    KroneckerEigen(Box<KroneckerEigenSolver>),
}

#[derive(Debug, Clone)]
pub struct DcOutcome {
    pub z: CVec,
    /// CG iterations spent (0 for the exact solver).
    pub iters: usize,
    pub residual: f64,
}

impl DataConsistencySolver {
    pub fn new(kind: &SolverKind, op: &MeasurementOperator) -> Self {
        match kind {
            SolverKind::Cg(s) => Self::Cg(s.clone()),
            SolverKind::KroneckerEigen => Self::KroneckerEigen(Box::new(KroneckerEigenSolver::new(op))),
        }
    }

    /// Solves `(A^H A + ρI) z = b`, warm-starting CG from `warm` when given.
    pub fn solve(
        &self,
        op: &MeasurementOperator,
        rho: f64,
        b: &CVec,
        warm: Option<&CVec>,
    ) -> Result<DcOutcome> {
        match self {
            Self::Cg(settings) => {
                let mut s = settings.clone();
                if let Some(w) = warm {
                    s.initial_guess = Some(w.clone());
                }
                let out = solve_regularized_normal(op, rho, b, &s)?;
                Ok(DcOutcome {
                    z: out.z,
                    iters: out.iters,
                    residual: out.residual,
                })
            }
            Self::KroneckerEigen(exact) => {
                let z = exact.solve(rho, b)?;
                let residual = relative_residual(op, rho, &z, b)?;
                Ok(DcOutcome { z, iters: 0, residual })
            }
        }
    }
}

/// Right-hand side `A^H y + ρ(x̂ − û)` of the data-consistency step.
pub fn data_consistency_rhs(
    op: &MeasurementOperator,
    aty: &CVec,
    rho: f64,
    x_hat: &CVec,
    u_hat: &CVec,
) -> Result<CVec> {
    check_dims("data consistency: A^H y", op.cols(), aty.len())?;
    check_dims("data consistency: x_hat", op.cols(), x_hat.len())?;
    check_dims("data consistency: u_hat", op.cols(), u_hat.len())?;
    Ok(aty + (x_hat - u_hat) * Complex64::from(rho))
}

/// `z = argmin ‖y − A z‖² + ρ‖z − (x̂ − û)‖²` solved by CG, warm-started from
/// `settings.initial_guess` when present.
pub fn data_consistency_update(
    op: &MeasurementOperator,
    y: &CVec,
    rho: f64,
    x_hat: &CVec,
    u_hat: &CVec,
    settings: &CgSettings,
) -> Result<CVec> {
    let aty = op.adjoint_apply(y)?;
    let b = data_consistency_rhs(op, &aty, rho, x_hat, u_hat)?;
    Ok(solve_regularized_normal(op, rho, &b, settings)?.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::complex_gaussian;
    use crate::rng::seeded;

    fn random_op(seed: u64, m_t: usize, n_t: usize, m_r: usize, n_r: usize) -> MeasurementOperator {
        let mut rng = seeded(seed);
        let l = CMat::from_column_slice(m_t, n_t, complex_gaussian(&mut rng, m_t * n_t, 1.0).as_slice());
        let r = CMat::from_column_slice(m_r, n_r, complex_gaussian(&mut rng, m_r * n_r, 1.0).as_slice());
        MeasurementOperator::from_factors(l, r)
    }

    #[test]
    fn identity_operator_halves_rhs() {
        let op = MeasurementOperator::from_factors(CMat::identity(3, 3), CMat::identity(2, 2));
        let b = complex_gaussian(&mut seeded(1), 6, 1.0);
        let out = solve_regularized_normal(&op, 1.0, &b, &CgSettings::default()).unwrap();
        assert!((out.z - &b * Complex64::from(0.5)).camax() < 1e-10);
    }

    #[test]
    fn zero_rhs_returns_zero_immediately() {
        let op = random_op(2, 3, 4, 2, 2);
        let out = solve_regularized_normal(&op, 0.3, &CVec::zeros(8), &CgSettings::default()).unwrap();
        assert_eq!(out.iters, 0);
        assert_eq!(out.z, CVec::zeros(8));
    }

    #[test]
    fn rejects_bad_inputs() {
        let op = random_op(3, 2, 2, 2, 2);
        let b = complex_gaussian(&mut seeded(4), 4, 1.0);
        assert!(solve_regularized_normal(&op, 0.0, &b, &CgSettings::default()).is_err());
        let mut bad = b.clone();
        bad[1] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(
            solve_regularized_normal(&op, 1.0, &bad, &CgSettings::default()),
            Err(Error::NonFinite { .. })
        ));
        let s = CgSettings {
            max_iters: 0,
            ..CgSettings::default()
        };
        assert!(solve_regularized_normal(&op, 1.0, &b, &s).is_err());
    }

    #[test]
    fn budget_exhaustion_reports_achieved_residual() {
        let op = random_op(5, 6, 6, 4, 4);
        let b = complex_gaussian(&mut seeded(6), 24, 1.0);
        let s = CgSettings {
            max_iters: 2,
            tolerance: 1e-14,
            initial_guess: None,
        };
        let out = solve_regularized_normal(&op, 1e-3, &b, &s).unwrap();
        assert_eq!(out.iters, 2);
        let recomputed = relative_residual(&op, 1e-3, &out.z, &b).unwrap();
        assert_eq!(out.residual, recomputed);
        assert!(out.residual > 1e-14);
    }

    #[test]
    fn warm_start_at_solution_needs_no_iterations() {
        let op = random_op(7, 3, 3, 2, 2);
        let b = complex_gaussian(&mut seeded(8), 6, 1.0);
        let exact = KroneckerEigenSolver::new(&op).solve(0.5, &b).unwrap();
        let s = CgSettings::default().with_initial_guess(exact);
        let out = solve_regularized_normal(&op, 0.5, &b, &s).unwrap();
        assert_eq!(out.iters, 0);
        assert!(out.residual < 1e-6);
    }

    #[test]
    fn zero_observation_gives_zero_update() {
        let op = random_op(9, 4, 4, 2, 2);
        let zero_m = CVec::zeros(op.rows());
        let zero_n = CVec::zeros(op.cols());
        let z = data_consistency_update(&op, &zero_m, 1.0, &zero_n, &zero_n, &CgSettings::default()).unwrap();
        assert_eq!(z, zero_n);
    }

    #[test]
    fn exact_solver_matches_cg_on_well_conditioned_system() {
        let op = random_op(10, 4, 4, 3, 3);
        let b = complex_gaussian(&mut seeded(11), 12, 1.0);
        let exact = KroneckerEigenSolver::new(&op).solve(2.0, &b).unwrap();
        let s = CgSettings {
            max_iters: 200,
            tolerance: 1e-13,
            initial_guess: None,
        };
        let cg = solve_regularized_normal(&op, 2.0, &b, &s).unwrap();
        assert!((exact - cg.z).camax() < 1e-10);
    }
}
