//! Smallest metric-weighted parameter change that fits one point exactly.

use crate::error::{contract, Result};
use crate::linalg::{cg_solve, CgConfig};
use crate::metric::MetricOperator;
use crate::models::Model;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationNorm {
    /// `r² / (gᵀ(H+εI)⁻¹g)`, `+∞` when no linearized change can fit.
    pub value: f64,
    /// `g = 0` with a nonzero residual.
    pub infeasible: bool,
    pub cg_converged: bool,
}

/// `min |Δ|²_{H+εI}` subject to `g·Δ = r` under linearization.
pub fn minimal_adaptation_norm<M: Model>(
    model: &M,
    params: &[f64],
    x: &[f64],
    y: f64,
    op: &MetricOperator,
    cg: &CgConfig,
) -> Result<AdaptationNorm> {
    if model.output_dim() != 1 {
        return Err(contract("adaptation norm needs a scalar output"));
    }
    if params.len() != model.num_params() || x.len() != model.input_dim() || op.dim() != params.len() {
        return Err(contract("parameter, input or metric dimension mismatch"));
    }
    let r = y - model.forward(params, x)[0];
    if r == 0.0 {
        return Ok(AdaptationNorm {
            value: 0.0,
            infeasible: false,
            cg_converged: true,
        });
    }
    let g = model.vjp(params, x, &[1.0]);
    if g.iter().all(|v| *v == 0.0) {
        return Ok(AdaptationNorm {
            value: f64::INFINITY,
            infeasible: true,
            cg_converged: true,
        });
    }
    let res = cg_solve(op, &g, cg)?;
    Ok(AdaptationNorm {
        value: r * r / res.solution.dot(&g),
        infeasible: false,
        cg_converged: res.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::metric::{build_metric, dense_metric, Damping, LossKind};
    use crate::models::{LinearFeatureModel, MlpModel};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tight() -> CgConfig {
        CgConfig {
            max_iters: 200,
            residual_tol: 1e-14,
        }
    }

    #[test]
    fn fitted_point_needs_no_change() {
        let model = LinearFeatureModel { num_features: 2 };
        let b = Dataset::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let op = build_metric(&model, &[1.0, 1.0], LossKind::Mse, &b, Damping::Absolute(0.0)).unwrap();
        let a = minimal_adaptation_norm(&model, &[1.0, 1.0], &[2.0, 3.0], 5.0, &op, &tight()).unwrap();
        assert_eq!(a.value, 0.0);
    }

    #[test]
    fn identity_metric_axis_constraint() {
        // H = I: unit features, mse factor 2 over two samples gives 1·I
        let model = LinearFeatureModel { num_features: 2 };
        let b = Dataset::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let op = build_metric(&model, &[0.0, 0.0], LossKind::Mse, &b, Damping::Absolute(0.0)).unwrap();
        let a = minimal_adaptation_norm(&model, &[0.0, 0.0], &[1.0, 0.0], 2.0, &op, &tight()).unwrap();
        assert!((a.value - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_with_residual_is_infeasible() {
        let model = LinearFeatureModel { num_features: 1 };
        let b = Dataset::from_pairs(&[(1.0, 0.0)]);
        let op = build_metric(&model, &[0.0], LossKind::Mse, &b, Damping::Absolute(0.0)).unwrap();
        let a = minimal_adaptation_norm(&model, &[0.0], &[0.0], 1.0, &op, &tight()).unwrap();
        assert!(a.infeasible && a.value.is_infinite());
    }

    #[test]
    fn matches_kkt_oracle() {
        let model = MlpModel::new(vec![1, 1, 1]).unwrap();
        assert_eq!(model.num_params(), 4);
        let model = MlpModel::new(vec![2, 1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = model.init_params(&mut rng);
        assert_eq!(params.len(), 5);
        let xs: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = Dataset::new(2, 1, xs, vec![0.0; 6]).unwrap();
        let op = build_metric(&model, &params, LossKind::Mse, &b, Damping::Absolute(0.05)).unwrap();
        let (x, y) = ([0.3, -0.8], 1.7);
        let got = minimal_adaptation_norm(&model, &params, &x, y, &op, &tight()).unwrap();

        // KKT system [[2A, g], [gᵀ, 0]] [Δ; ν] = [0; r]
        let a = dense_metric(&op, 16).unwrap();
        let g = DVector::from_vec(model.vjp(&params, &x, &[1.0]));
        let r = y - model.forward(&params, &x)[0];
        let mut kkt = DMatrix::zeros(6, 6);
        kkt.view_mut((0, 0), (5, 5)).copy_from(&(&a * 2.0));
        for k in 0..5 {
            kkt[(k, 5)] = g[k];
            kkt[(5, k)] = g[k];
        }
        let mut rhs = DVector::zeros(6);
        rhs[5] = r;
        let sol = kkt.lu().solve(&rhs).unwrap();
        let delta = sol.rows(0, 5).into_owned();
        let oracle = delta.dot(&(&a * &delta));
        assert!((got.value - oracle).abs() < 1e-8 * oracle.max(1.0), "{} vs {oracle}", got.value);
    }
}
