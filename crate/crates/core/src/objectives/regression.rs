//! Taylor-approximated FRM for differentiable regression models.
//!
//! Each point contributes `rᵀ W⁻¹ r + logdet W` with `r = y − f_θ(x)` and
//! `W = J (H+εI)⁻¹ Jᵀ`. Both `J` and `H` depend on θ.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::{Dataset, LabeledBatch};
use crate::diff::{output_hvp, output_jacobian, ScalarFn};
use crate::error::{contract, FrmError, Result};
use crate::linalg::{logdet_small, solve_weight, CgConfig};
use crate::metric::{build_metric, dense_metric, LossKind, MetricOperator};
use crate::models::Model;
use crate::param::ParamVector;

use super::{ObjectiveConfig, WeightMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionEval {
    pub value: f64,
    /// `Σ rᵀ W⁻¹ r`.
    pub quadratic: f64,
    /// `Σ logdet W`, zero when the log-determinant is disabled.
    pub logdet: f64,
    /// CG solves that hit their iteration budget.
    pub cg_warnings: usize,
}

/// Inverse and log-determinant of a small SPD matrix.
pub(crate) fn invert_spd(w: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    match Cholesky::new(w.clone()) {
        Some(ch) => {
            let logdet = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            Ok((ch.inverse(), logdet))
        }
        None => {
            // reports the offending eigenvalue
            logdet_small(w)?;
            Err(FrmError::Numerical("Cholesky failed on a positive definite weight".into()))
        }
    }
}

fn check_batch<M: Model>(model: &M, params: &[f64], batch: &LabeledBatch, op: &MetricOperator) -> Result<()> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    if params.len() != model.num_params() || op.dim() != model.num_params() {
        return Err(contract("parameter, model and metric dimensions disagree"));
    }
    if batch.input_dim() != model.input_dim() || batch.output_dim() != model.output_dim() {
        return Err(contract("batch shape does not match the model"));
    }
    Ok(())
}

fn residual<M: Model>(model: &M, params: &[f64], batch: &LabeledBatch, i: usize) -> DVector<f64> {
    let f = model.forward(params, batch.input(i));
    DVector::from_iterator(f.len(), batch.target(i).iter().zip(&f).map(|(y, f)| y - f))
}

/// Dense Cholesky factor of `H + εI`, for models small enough that one
/// factorization per refresh beats a CG solve per point.
pub struct DenseFactor(Cholesky<f64, Dyn>);

impl DenseFactor {
    pub fn new(op: &MetricOperator, cap: usize) -> Result<Self> {
        let h = dense_metric(op, cap)?;
        Cholesky::new(h)
            .map(DenseFactor)
            .ok_or_else(|| FrmError::Singular("damped metric is not positive definite".into()))
    }

    pub fn solve(&self, rhs: &[f64]) -> ParamVector {
        let b = DVector::from_column_slice(rhs);
        ParamVector::new(self.0.solve(&b).as_slice().to_vec())
    }
}

/// Per-point `W_i⁻¹` and `logdet W_i`, frozen at the parameters they were
/// computed at.
#[derive(Debug, Clone)]
pub struct DetachedWeights {
    pub inverses: Vec<DMatrix<f64>>,
    pub logdets: Vec<f64>,
    pub cg_warnings: usize,
}

impl DetachedWeights {
    /// Matrix-free: one CG solve per output row of every point.
    pub fn compute<M: Model>(
        model: &M,
        params: &[f64],
        batch: &LabeledBatch,
        op: &MetricOperator,
        cg: &CgConfig,
    ) -> Result<Self> {
        check_batch(model, params, batch, op)?;
        let mut out = DetachedWeights {
            inverses: Vec::with_capacity(batch.len()),
            logdets: Vec::with_capacity(batch.len()),
            cg_warnings: 0,
        };
        for i in 0..batch.len() {
            let jac = output_jacobian(model, params, batch.input(i))?;
            let ws = solve_weight(&jac, op, cg)?;
            out.cg_warnings += ws.cg_warnings;
            let (inv, logdet) = invert_spd(&ws.weight)?;
            out.inverses.push(inv);
            out.logdets.push(logdet);
        }
        Ok(out)
    }

    /// Same weights from a dense factorization of the metric.
    pub fn compute_dense<M: Model>(model: &M, params: &[f64], batch: &LabeledBatch, factor: &DenseFactor) -> Result<Self> {
        let mut out = DetachedWeights {
            inverses: Vec::with_capacity(batch.len()),
            logdets: Vec::with_capacity(batch.len()),
            cg_warnings: 0,
        };
        for i in 0..batch.len() {
            let jac = output_jacobian(model, params, batch.input(i))?;
            let d = jac.nrows();
            let solved: Vec<ParamVector> = (0..d)
                .map(|k| factor.solve(jac.row(k).transpose().as_slice()))
                .collect();
            let mut w = DMatrix::from_fn(d, d, |a, b| solved[b].dot(jac.row(a).transpose().as_slice()));
            w = (&w + w.transpose()) * 0.5;
            let (inv, logdet) = invert_spd(&w)?;
            out.inverses.push(inv);
            out.logdets.push(logdet);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.inverses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inverses.is_empty()
    }

    /// Keeps only the listed points, in the given order.
    pub fn subset(&self, idx: &[usize]) -> DetachedWeights {
        DetachedWeights {
            inverses: idx.iter().map(|&i| self.inverses[i].clone()).collect(),
            logdets: idx.iter().map(|&i| self.logdets[i]).collect(),
            cg_warnings: self.cg_warnings,
        }
    }
}

/// Objective value with frozen weights.
pub fn weight_form_value<M: Model>(
    model: &M,
    params: &[f64],
    batch: &LabeledBatch,
    weights: &DetachedWeights,
    include_logdet: bool,
) -> Result<RegressionEval> {
    if weights.len() != batch.len() {
        return Err(contract("one frozen weight per batch point required"));
    }
    let mut quadratic = 0.0;
    for i in 0..batch.len() {
        let r = residual(model, params, batch, i);
        quadratic += r.dot(&(&weights.inverses[i] * &r));
    }
    let logdet = if include_logdet { weights.logdets.iter().sum() } else { 0.0 };
    Ok(RegressionEval {
        value: quadratic + logdet,
        quadratic,
        logdet,
        cg_warnings: weights.cg_warnings,
    })
}

/// `Σ_i −2 J_iᵀ W_i⁻¹ r_i`: the gradient with every `W_i` held fixed.
pub fn weight_form_gradient<M: Model>(
    model: &M,
    params: &[f64],
    batch: &LabeledBatch,
    weights: &DetachedWeights,
) -> Result<ParamVector> {
    if weights.len() != batch.len() {
        return Err(contract("one frozen weight per batch point required"));
    }
    let mut grad = ParamVector::zeros(params.len());
    for i in 0..batch.len() {
        let r = residual(model, params, batch, i);
        let a = &weights.inverses[i] * &r;
        let w: Vec<f64> = a.iter().map(|v| -2.0 * v).collect();
        grad.axpy(1.0, &model.vjp(params, batch.input(i), &w));
    }
    Ok(grad)
}

pub fn frm_regression_objective<M: Model>(
    model: &M,
    params: &[f64],
    batch: &LabeledBatch,
    op: &MetricOperator,
    cfg: &ObjectiveConfig,
) -> Result<RegressionEval> {
    cfg.validate()?;
    let weights = DetachedWeights::compute(model, params, batch, op, &cfg.cg)?;
    weight_form_value(model, params, batch, &weights, cfg.include_logdet)
}

/// Gradient of [`frm_regression_objective`].
///
/// Detached mode freezes the weights. Implicit mode also differentiates
/// `W = J A⁻¹ Jᵀ` with `A = H(θ) + εI`, using
/// `dW = dJ·Z + Zᵀ·dJᵀ − Zᵀ·dA·Z` for `Z = A⁻¹Jᵀ`. Every term reduces to
/// Hessian-vector products of the model outputs, so nothing is
/// materialized. ε is treated as a constant. Implicit mode needs `op` to be
/// linearized at `params`.
pub fn frm_regression_gradient<M: Model>(
    model: &M,
    params: &[f64],
    batch: &LabeledBatch,
    op: &MetricOperator,
    cfg: &ObjectiveConfig,
) -> Result<ParamVector> {
    cfg.validate()?;
    match cfg.weight_mode {
        WeightMode::Detached => {
            let weights = DetachedWeights::compute(model, params, batch, op, &cfg.cg)?;
            weight_form_gradient(model, params, batch, &weights)
        }
        WeightMode::Implicit => implicit_gradient(model, params, batch, op, cfg),
    }
}

fn implicit_gradient<M: Model>(
    model: &M,
    params: &[f64],
    batch: &LabeledBatch,
    op: &MetricOperator,
    cfg: &ObjectiveConfig,
) -> Result<ParamVector> {
    check_batch(model, params, batch, op)?;
    let logdet_weight = if cfg.include_logdet { 1.0 } else { 0.0 };
    let mut acc = WeightDerivative::new(model, params, op)?;
    let mut grad = ParamVector::zeros(params.len());
    for i in 0..batch.len() {
        let x = batch.input(i);
        let jac = output_jacobian(model, params, x)?;
        let ws = solve_weight(&jac, op, &cfg.cg)?;
        let (winv, _) = invert_spd(&ws.weight)?;
        let r = residual(model, params, batch, i);
        let a = &winv * &r;
        let w: Vec<f64> = a.iter().map(|v| -2.0 * v).collect();
        grad.axpy(1.0, &model.vjp(params, x, &w));
        // ∂q/∂W, symmetric
        let m = -(&a * a.transpose()) + &winv * logdet_weight;
        acc.add_point(x, &ws.solved, &m);
    }
    grad.axpy(1.0, &acc.finish());
    Ok(grad)
}

/// Accumulates `∇θ Σ_i tr(M_i W_i)` for fixed symmetric `M_i`, where
/// `W_i = J_i A⁻¹ J_iᵀ` and `A = H(θ) + εI`.
///
/// With `Z = A⁻¹Jᵀ`, `dW = dJ·Z + Zᵀ·dJᵀ − Zᵀ·dA·Z`. The `dJ` terms are
/// output HVPs at the batch point. The `dA` term is summed over the metric
/// rows once at the end, so its cost does not scale with the batch.
pub(crate) struct WeightDerivative<'a, M> {
    model: &'a M,
    params: &'a [f64],
    op: &'a MetricOperator,
    grad: ParamVector,
    /// Per metric row `r`: `Σ M_ab (j_r·z_b) z_a`.
    row_dirs: Vec<ParamVector>,
    /// Per metric row `r`: `Σ M_ab (j_r·z_a)(j_r·z_b)`.
    row_scalars: Vec<f64>,
}

impl<'a, M: Model> WeightDerivative<'a, M> {
    pub(crate) fn new(model: &'a M, params: &'a [f64], op: &'a MetricOperator) -> Result<Self> {
        let stale = op
            .params()
            .iter()
            .zip(params)
            .any(|(a, b)| (a - b).abs() > 1e-12 * (1.0 + b.abs()));
        if stale || op.params().len() != params.len() {
            return Err(contract("implicit gradients need the metric linearized at the current parameters"));
        }
        if op.num_rows() != op.samples().len() * model.output_dim() {
            return Err(contract("metric rows do not match samples × outputs"));
        }
        let p = params.len();
        Ok(WeightDerivative {
            model,
            params,
            op,
            grad: ParamVector::zeros(p),
            row_dirs: vec![ParamVector::zeros(p); op.num_rows()],
            row_scalars: vec![0.0; op.num_rows()],
        })
    }

    /// Adds `tr(M W)` for the point `x` whose solved columns are `z`.
    pub(crate) fn add_point(&mut self, x: &[f64], z: &[ParamVector], m: &DMatrix<f64>) {
        let d_out = self.model.output_dim();
        let p = self.params.len();
        for a in 0..d_out {
            let mut u = ParamVector::zeros(p);
            for (b, zb) in z.iter().enumerate() {
                u.axpy(m[(a, b)], zb);
            }
            self.grad
                .axpy(2.0, &output_hvp(self.model, self.params, x, &unit(d_out, a), &u));
        }
        for (row, (dir, scalar)) in self.row_dirs.iter_mut().zip(self.row_scalars.iter_mut()).enumerate() {
            let j = self.op.row(row);
            let proj: Vec<f64> = z.iter().map(|zb| zb.dot(j)).collect();
            for a in 0..d_out {
                let t: f64 = (0..d_out).map(|b| m[(a, b)] * proj[b]).sum();
                if t != 0.0 {
                    dir.axpy(t, &z[a]);
                    *scalar += t * proj[a];
                }
            }
        }
    }

    pub(crate) fn finish(mut self) -> ParamVector {
        let d_out = self.model.output_dim();
        let samples = self.op.samples();
        for (row, (dir, scalar)) in self.row_dirs.iter().zip(&self.row_scalars).enumerate() {
            let (s, k) = (row / d_out, row % d_out);
            let xs = samples.input(s);
            let c = self.op.row_coeff(row);
            self.grad
                .axpy(-2.0 * c, &output_hvp(self.model, self.params, xs, &unit(d_out, k), dir));
            if self.op.loss() == LossKind::Bce {
                // c = σ'(f)/m, so ∇c = c (1 − 2σ) j
                let sig = crate::metric::sigmoid(self.model.forward(self.params, xs)[0]);
                self.grad.axpy(-scalar * c * (1.0 - 2.0 * sig), self.op.row(row));
            }
        }
        self.grad
    }
}

fn unit(n: usize, k: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[k] = 1.0;
    e
}

/// The full objective as a function of θ alone: the metric is rebuilt at
/// every evaluation point, so finite differences see its θ-dependence.
pub struct FrmRegression<'a, M> {
    pub model: &'a M,
    pub batch: &'a LabeledBatch,
    /// Inputs defining the expectation in the metric.
    pub metric_samples: &'a Dataset,
    pub loss: LossKind,
    pub cfg: ObjectiveConfig,
}

impl<M: Model> FrmRegression<'_, M> {
    fn metric(&self, at: &[f64]) -> Result<MetricOperator> {
        build_metric(self.model, at, self.loss, self.metric_samples, self.cfg.damping)
    }
}

impl<M: Model> ScalarFn for FrmRegression<'_, M> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn value(&self, at: &[f64]) -> Result<f64> {
        let op = self.metric(at)?;
        Ok(frm_regression_objective(self.model, at, self.batch, &op, &self.cfg)?.value)
    }

    fn gradient(&self, at: &[f64]) -> Result<ParamVector> {
        let op = self.metric(at)?;
        frm_regression_gradient(self.model, at, self.batch, &op, &self.cfg)
    }
}
