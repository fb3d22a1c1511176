//! Conjugate-gradient solves against the metric, per-point weight matrices,
//! small log-determinants and a stable Gaussian log-CDF.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diff::output_jacobian;
use crate::error::{contract, FrmError, Result};
use crate::models::Model;
use crate::param::{dot, ParamVector};

/// A symmetric linear map on parameter space.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Vec<f64>;
}

/// Explicit matrix wrapped as an operator; used by tests and oracles.
#[derive(Debug, Clone)]
pub struct DenseOperator(pub DMatrix<f64>);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.0.nrows();
        (0..n).map(|i| (0..n).map(|j| self.0[(i, j)] * v[j]).sum()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgConfig {
    pub max_iters: usize,
    /// Relative to `|rhs|`.
    pub residual_tol: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            max_iters: 200,
            residual_tol: 1e-8,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.residual_tol > 0.0) {
            return Err(contract(format!("invalid CG config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub solution: ParamVector,
    pub iterations: usize,
    /// `|op(z) − rhs| / |rhs|` of the returned iterate (0 for a zero rhs).
    pub relative_residual: f64,
    /// False when the iteration budget ran out; the best iterate is returned.
    pub converged: bool,
}

pub fn cg_solve<O: LinearOperator + ?Sized>(op: &O, rhs: &[f64], cfg: &CgConfig) -> Result<CgResult> {
    cfg.validate()?;
    if rhs.len() != op.dim() {
        return Err(contract(format!("rhs has length {}, operator {}", rhs.len(), op.dim())));
    }
    let n = rhs.len();
    let rhs_norm = dot(rhs, rhs).sqrt();
    let mut x = vec![0.0; n];
    if rhs_norm == 0.0 {
        return Ok(CgResult {
            solution: ParamVector::new(x),
            iterations: 1,
            relative_residual: 0.0,
            converged: true,
        });
    }
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut best = (x.clone(), 1.0);
    for it in 1..=cfg.max_iters {
        let ap = op.apply(&p);
        let pap = dot(&p, &ap);
        if !pap.is_finite() {
            return Err(FrmError::Numerical(format!("non-finite curvature in CG iteration {it}")));
        }
        if pap <= 0.0 {
            // exhausted the positive-definite part; keep the best iterate
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(FrmError::Numerical(format!("non-finite CG iterate at iteration {it}")));
        }
        let rel = rr_new.sqrt() / rhs_norm;
        if rel < best.1 {
            best = (x.clone(), rel);
        }
        if rel <= cfg.residual_tol {
            return Ok(CgResult {
                solution: ParamVector::new(x),
                iterations: it,
                relative_residual: rel,
                converged: true,
            });
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    // recursive residuals drift; report the true residual of the best iterate
    let (z, _) = best;
    let az = op.apply(&z);
    let true_res = az.iter().zip(rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / rhs_norm;
    Ok(CgResult {
        solution: ParamVector::new(z),
        iterations: cfg.max_iters,
        relative_residual: true_res,
        converged: true_res <= cfg.residual_tol,
    })
}

/// `W = J (H+εI)⁻¹ Jᵀ` together with the solved columns `z_k = (H+εI)⁻¹ j_k`.
#[derive(Debug, Clone)]
pub struct WeightSolve {
    pub weight: DMatrix<f64>,
    pub solved: Vec<ParamVector>,
    pub cg_warnings: usize,
}

/// Solves for the weight matrix given the Jacobian rows at a point.
pub fn solve_weight<O: LinearOperator + ?Sized>(jac: &DMatrix<f64>, op: &O, cfg: &CgConfig) -> Result<WeightSolve> {
    let d = jac.nrows();
    let mut solved = Vec::with_capacity(d);
    let mut warnings = 0;
    let rows: Vec<Vec<f64>> = (0..d).map(|k| jac.row(k).iter().copied().collect()).collect();
    for row in &rows {
        let res = cg_solve(op, row, cfg)?;
        if !res.converged {
            warnings += 1;
        }
        solved.push(res.solution);
    }
    let mut w = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            w[(a, b)] = dot(&rows[a], &solved[b]);
        }
    }
    let w = (&w + w.transpose()) * 0.5;
    Ok(WeightSolve {
        weight: w,
        solved,
        cg_warnings: warnings,
    })
}

/// Output-space covariance `J_i (H+εI)⁻¹ J_iᵀ` at input `x`.
pub fn weight_matrix<M: Model, O: LinearOperator + ?Sized>(
    model: &M,
    params: &[f64],
    x: &[f64],
    op: &O,
    cfg: &CgConfig,
) -> Result<WeightSolve> {
    if model.output_dim() > 16 {
        return Err(contract("weight matrices are limited to 16 outputs"));
    }
    let jac = output_jacobian(model, params, x)?;
    solve_weight(&jac, op, cfg)
}

pub fn logdet_small(w: &DMatrix<f64>) -> Result<f64> {
    if w.nrows() != w.ncols() || w.nrows() == 0 || w.nrows() > 16 {
        return Err(contract(format!("logdet needs a square matrix of size 1..=16, got {:?}", w.shape())));
    }
    let eig = SymmetricEigen::new(w.clone()).eigenvalues;
    let smallest = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(smallest > 0.0) {
        return Err(FrmError::NotPositiveDefinite {
            smallest_eigenvalue: smallest,
        });
    }
    Ok(eig.iter().map(|v| v.ln()).sum())
}

const ASYMPTOTIC_BELOW: f64 = -8.0;

/// `log Φ(z)` for the standard normal CDF.
///
/// Uses `erfc` down to `z = −8` and the asymptotic tail series
/// `Φ(z) ≈ φ(z)/|z| · Σ (−1)^k (2k−1)!! / z^{2k}` below, where `erfc`
/// would eventually underflow.
pub fn gaussian_logcdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z < ASYMPTOTIC_BELOW {
        let z2 = z * z;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..40 {
            let next = -term * (2 * k - 1) as f64 / z2;
            if next.abs() >= term.abs() {
                break;
            }
            term = next;
            sum += term;
        }
        -0.5 * z2 - (-z).ln() - 0.5 * (2.0 * PI).ln() + sum.ln()
    } else if z < 0.0 {
        (0.5 * libm::erfc(-z / SQRT_2)).ln()
    } else {
        (-0.5 * libm::erfc(z / SQRT_2)).ln_1p()
    }
}

/// `d/dz log Φ(z) = φ(z)/Φ(z)`.
pub fn gaussian_logcdf_derivative(z: f64) -> f64 {
    let log_pdf = -0.5 * z * z - 0.5 * (2.0 * PI).ln();
    (log_pdf - gaussian_logcdf(z)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd2() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[14.0 / 3.0, 2.0, 2.0, 1.0])
    }

    #[test]
    fn identity_plus_damping() {
        let eps = 0.25;
        let op = DenseOperator(DMatrix::identity(3, 3) * (1.0 + eps));
        let res = cg_solve(&op, &[1.0, -2.0, 3.0], &CgConfig::default()).unwrap();
        for (z, r) in res.solution.iter().zip([1.0, -2.0, 3.0]) {
            assert!((z - r / (1.0 + eps)).abs() < 1e-14);
        }
        assert!(res.converged);
    }

    #[test]
    fn zero_rhs_returns_zero_in_one_iteration() {
        let op = DenseOperator(spd2());
        let res = cg_solve(&op, &[0.0, 0.0], &CgConfig::default()).unwrap();
        assert_eq!(res.iterations, 1);
        assert!(res.solution.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_dense_inverse() {
        // H⁻¹ = ((1.5, −3), (−3, 7))
        let op = DenseOperator(spd2());
        let res = cg_solve(&op, &[1.0, 0.0], &CgConfig::default()).unwrap();
        assert!((res.solution[0] - 1.5).abs() < 1e-8);
        assert!((res.solution[1] + 3.0).abs() < 1e-8);
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let diag: Vec<f64> = (1..=20).map(|i| i as f64 * i as f64).collect();
        let op = DenseOperator(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)));
        let rhs = vec![1.0; 20];
        let res = cg_solve(&op, &rhs, &CgConfig { max_iters: 3, residual_tol: 1e-12 }).unwrap();
        assert!(!res.converged);
        assert!(res.relative_residual < 1.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let op = DenseOperator(spd2());
        assert!(cg_solve(&op, &[1.0, 0.0], &CgConfig { max_iters: 0, residual_tol: 1e-8 }).is_err());
        assert!(cg_solve(&op, &[1.0, 0.0], &CgConfig { max_iters: 5, residual_tol: 0.0 }).is_err());
    }

    #[test]
    fn logdet_examples() {
        assert!(logdet_small(&DMatrix::identity(2, 2)).unwrap().abs() < 1e-15);
        assert!((logdet_small(&DMatrix::from_element(1, 1, 2.5)).unwrap() - 2.5f64.ln()).abs() < 1e-15);
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((logdet_small(&w).unwrap() - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn logdet_rejects_indefinite() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match logdet_small(&w) {
            Err(FrmError::NotPositiveDefinite { smallest_eigenvalue }) => {
                assert!((smallest_eigenvalue + 1.0).abs() < 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn logcdf_reference_values() {
        assert!((gaussian_logcdf(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(gaussian_logcdf(10.0).abs() < 1e-20);
        // log(erfc(10/√2)/2) = −53.23128515051247
        assert!((gaussian_logcdf(-10.0) + 53.231_285_150_512_47).abs() < 1e-10);
        assert!(gaussian_logcdf(-40.0).is_finite());
    }

    #[test]
    fn branches_agree_at_the_switch() {
        let below = gaussian_logcdf(-8.0 - 1e-12);
        let direct = (0.5 * libm::erfc(8.0 / SQRT_2)).ln();
        assert!((below - direct).abs() < 1e-10);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for z in [-30.0, -9.0, -2.0, 0.0, 1.5, 6.0] {
            let h = 1e-6;
            let fd = (gaussian_logcdf(z + h) - gaussian_logcdf(z - h)) / (2.0 * h);
            let d = gaussian_logcdf_derivative(z);
            assert!((fd - d).abs() < 1e-6 * d.abs().max(1.0), "z = {z}");
        }
    }
}
