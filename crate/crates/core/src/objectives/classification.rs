//! Taylor-approximated FRM for binary classification.
//!
//! A point is scored by its signed distance to the decision boundary in the
//! functional metric, `m = s·f / √(gᵀ(H+εI)⁻¹g)` with `s = ±1` from the
//! label. The objective `−Σ log Φ(m)` is the negative log-probability that a
//! Gaussian function-space perturbation keeps each point on the correct side.

use nalgebra::DMatrix;

use crate::data::{Dataset, LabeledBatch};
use crate::diff::ScalarFn;
use crate::error::{contract, Result};
use crate::linalg::{cg_solve, gaussian_logcdf, gaussian_logcdf_derivative};
use crate::metric::{build_metric, LossKind, MetricOperator};
use crate::models::Model;
use crate::param::ParamVector;

use super::regression::WeightDerivative;
use super::{ObjectiveConfig, WeightMode};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationEval {
    pub value: f64,
    pub margins: Vec<f64>,
    /// Points with `g = 0`, scored with margin 0.
    pub zero_gradient_points: usize,
    pub cg_warnings: usize,
}

struct PointMargin {
    margin: f64,
    sign: f64,
    logit: f64,
    /// `gᵀ(H+εI)⁻¹g`, zero for a zero gradient.
    spread: f64,
    gradient: Vec<f64>,
    solved: ParamVector,
}

fn label_sign(y: f64) -> Result<f64> {
    if y == 1.0 {
        Ok(1.0)
    } else if y == 0.0 {
        Ok(-1.0)
    } else {
        Err(contract(format!("binary labels must be 0 or 1, got {y}")))
    }
}

fn point_margins<M: Model>(
    model: &M,
    params: &[f64],
    batch: &LabeledBatch,
    op: &MetricOperator,
    cfg: &ObjectiveConfig,
    warnings: &mut usize,
) -> Result<Vec<PointMargin>> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    if model.output_dim() != 1 || batch.output_dim() != 1 {
        return Err(contract("binary classification needs a single logit output"));
    }
    if params.len() != model.num_params() || op.dim() != params.len() || batch.input_dim() != model.input_dim() {
        return Err(contract("parameter, model, metric and batch shapes disagree"));
    }
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let x = batch.input(i);
        let sign = label_sign(batch.target(i)[0])?;
        let logit = model.forward(params, x)[0];
        let gradient = model.vjp(params, x, &[1.0]);
        if gradient.iter().all(|v| *v == 0.0) {
            out.push(PointMargin {
                margin: 0.0,
                sign,
                logit,
                spread: 0.0,
                gradient,
                solved: ParamVector::zeros(params.len()),
            });
            continue;
        }
        let res = cg_solve(op, &gradient, &cfg.cg)?;
        if !res.converged {
            *warnings += 1;
        }
        let spread = res.solution.dot(&gradient);
        out.push(PointMargin {
            margin: sign * logit / spread.sqrt(),
            sign,
            logit,
            spread,
            gradient,
            solved: res.solution,
        });
    }
    Ok(out)
}

pub fn frm_binary_classification_objective<M: Model>(
    model: &M,
    params: &[f64],
    batch: &LabeledBatch,
    op: &MetricOperator,
    cfg: &ObjectiveConfig,
) -> Result<ClassificationEval> {
    let mut cg_warnings = 0;
    let points = point_margins(model, params, batch, op, cfg, &mut cg_warnings)?;
    Ok(ClassificationEval {
        value: -points.iter().map(|p| gaussian_logcdf(p.margin)).sum::<f64>(),
        margins: points.iter().map(|p| p.margin).collect(),
        zero_gradient_points: points.iter().filter(|p| p.spread == 0.0).count(),
        cg_warnings,
    })
}

/// Detached mode holds each `gᵀ(H+εI)⁻¹g` fixed; implicit mode also
/// differentiates it, which needs `op` linearized at `params`.
pub fn frm_binary_classification_gradient<M: Model>(
    model: &M,
    params: &[f64],
    batch: &LabeledBatch,
    op: &MetricOperator,
    cfg: &ObjectiveConfig,
) -> Result<ParamVector> {
    let mut warnings = 0;
    let points = point_margins(model, params, batch, op, cfg, &mut warnings)?;
    let mut grad = ParamVector::zeros(params.len());
    let mut implicit = match cfg.weight_mode {
        WeightMode::Implicit => Some(WeightDerivative::new(model, params, op)?),
        WeightMode::Detached => None,
    };
    for (i, p) in points.iter().enumerate() {
        if p.spread == 0.0 {
            continue;
        }
        let kappa = gaussian_logcdf_derivative(p.margin);
        let root = p.spread.sqrt();
        grad.axpy(-kappa * p.sign / root, &p.gradient);
        if let Some(acc) = implicit.as_mut() {
            let mu = kappa * p.sign * p.logit / (2.0 * p.spread * root);
            acc.add_point(batch.input(i), std::slice::from_ref(&p.solved), &DMatrix::from_element(1, 1, mu));
        }
    }
    if let Some(acc) = implicit {
        grad.axpy(1.0, &acc.finish());
    }
    Ok(grad)
}

/// The classification objective with the metric rebuilt at every θ.
pub struct FrmClassification<'a, M> {
    pub model: &'a M,
    pub batch: &'a LabeledBatch,
    pub metric_samples: &'a Dataset,
    pub cfg: ObjectiveConfig,
}

impl<M: Model> ScalarFn for FrmClassification<'_, M> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn value(&self, at: &[f64]) -> Result<f64> {
        let op = build_metric(self.model, at, LossKind::Bce, self.metric_samples, self.cfg.damping)?;
        Ok(frm_binary_classification_objective(self.model, at, self.batch, &op, &self.cfg)?.value)
    }

    fn gradient(&self, at: &[f64]) -> Result<ParamVector> {
        let op = build_metric(self.model, at, LossKind::Bce, self.metric_samples, self.cfg.damping)?;
        frm_binary_classification_gradient(self.model, at, self.batch, &op, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{check_gradient, output_jacobian};
    use crate::linalg::CgConfig;
    use crate::metric::{dense_metric, Damping};
    use crate::models::{AffineModel, MlpModel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(mode: WeightMode, eps: f64) -> ObjectiveConfig {
        ObjectiveConfig {
            weight_mode: mode,
            damping: Damping::Absolute(eps),
            cg: CgConfig {
                max_iters: 200,
                residual_tol: 1e-13,
            },
            ..ObjectiveConfig::linear()
        }
    }

    fn toy() -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..20 {
            let a: f64 = rng.random_range(-2.0..2.0);
            let b: f64 = rng.random_range(-2.0..2.0);
            xs.extend([a, b]);
            ys.push(if a + 0.5 * b + rng.random_range(-0.5..0.5) > 0.0 { 1.0 } else { 0.0 });
        }
        Dataset::new(2, 1, xs, ys).unwrap()
    }

    #[test]
    fn boundary_points_cost_ln2() {
        let b = Dataset::from_pairs(&[(1.0, 1.0), (-2.0, 0.0)]);
        let model = AffineModel::new(1);
        let op = build_metric(&model, &[0.0, 0.0], LossKind::Bce, &b, Damping::Absolute(1e-3)).unwrap();
        let e = frm_binary_classification_objective(&model, &[0.0, 0.0], &b, &op, &cfg(WeightMode::Detached, 1e-3))
            .unwrap();
        assert!((e.value - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn large_correct_margin_costs_nothing() {
        let b = Dataset::from_pairs(&[(1.0, 1.0)]);
        let model = AffineModel::new(1);
        let op = build_metric(&model, &[0.0, 0.0], LossKind::Bce, &b, Damping::Absolute(1.0)).unwrap();
        let e = frm_binary_classification_objective(&model, &[0.0, 1e4], &b, &op, &cfg(WeightMode::Detached, 1.0))
            .unwrap();
        assert!(e.value < 1e-12 && e.value >= 0.0);
    }

    #[test]
    fn margins_match_dense_oracle() {
        let b = toy();
        let model = AffineModel::new(2);
        let params = [0.7, -0.3, 0.1];
        let op = build_metric(&model, &params, LossKind::Bce, &b, Damping::Absolute(1e-3)).unwrap();
        let e = frm_binary_classification_objective(&model, &params, &b, &op, &cfg(WeightMode::Detached, 1e-3))
            .unwrap();
        let hinv = dense_metric(&op, 16).unwrap().try_inverse().unwrap();
        for i in 0..b.len() {
            let g = output_jacobian(&model, &params, b.input(i)).unwrap().transpose();
            let q = (g.transpose() * &hinv * &g)[(0, 0)];
            let s = if b.target(i)[0] == 1.0 { 1.0 } else { -1.0 };
            let f = model.forward(&params, b.input(i))[0];
            assert!((e.margins[i] - s * f / q.sqrt()).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_gradient_point_is_counted() {
        // a linear-feature model with a zero input has g = 0
        let model = crate::models::LinearFeatureModel { num_features: 1 };
        let b = Dataset::from_pairs(&[(0.0, 1.0), (1.0, 1.0)]);
        let op = build_metric(&model, &[0.5], LossKind::Bce, &b, Damping::Absolute(1e-3)).unwrap();
        let e = frm_binary_classification_objective(&model, &[0.5], &b, &op, &cfg(WeightMode::Detached, 1e-3))
            .unwrap();
        assert_eq!(e.zero_gradient_points, 1);
        assert_eq!(e.margins[0], 0.0);
    }

    #[test]
    fn non_binary_labels_rejected() {
        let b = Dataset::from_pairs(&[(1.0, 0.5)]);
        let model = AffineModel::new(1);
        let op = build_metric(&model, &[0.0, 0.0], LossKind::Bce, &b, Damping::Absolute(1.0)).unwrap();
        assert!(frm_binary_classification_objective(&model, &[0.0, 0.0], &b, &op, &cfg(WeightMode::Detached, 1.0))
            .is_err());
    }

    #[test]
    fn implicit_gradient_matches_finite_differences() {
        let b = toy();
        let model = MlpModel::new(vec![2, 3, 1]).unwrap();
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(5));
        let f = FrmClassification {
            model: &model,
            batch: &b,
            metric_samples: &b,
            cfg: cfg(WeightMode::Implicit, 1e-2),
        };
        let report = check_gradient(&f, &params, 1e-4);
        assert!(report.passed, "{report:?}");
    }

    proptest! {
        #[test]
        fn loss_falls_as_correct_logit_grows(x in -3.0f64..3.0, start in 0.0f64..2.0) {
            let b = Dataset::from_pairs(&[(x, 1.0)]);
            let model = AffineModel::new(1);
            let op = build_metric(&model, &[0.0, 0.0], LossKind::Bce, &b, Damping::Absolute(0.1)).unwrap();
            let c = cfg(WeightMode::Detached, 0.1);
            let mut prev = f64::INFINITY;
            for k in 0..20 {
                let offset = start + 0.5 * k as f64;
                let v = frm_binary_classification_objective(&model, &[0.0, offset], &b, &op, &c).unwrap().value;
                prop_assert!(v < prev);
                prev = v;
            }
        }
    }
}
