//! [`Trainable`] adapters for the model-based objectives.

use crate::data::Dataset;
use crate::diff::SmoothFn;
use crate::error::{contract, Result};
use crate::metric::{build_metric, LossKind, DEFAULT_DENSE_CAP};
use crate::models::Model;
use crate::objectives::{
    frm_regression_gradient, weight_form_gradient, weight_form_value, DenseFactor, DetachedWeights, ErmLoss,
    ObjectiveConfig, WeightMode,
};
use crate::param::ParamVector;

use super::Trainable;

pub struct ErmTask<'a, M> {
    pub loss: LossKind,
    pub model: &'a M,
    pub data: &'a Dataset,
}

impl<M: Model> Trainable for ErmTask<'_, M> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn num_points(&self) -> usize {
        self.data.len()
    }

    fn batch_value_and_grad(&mut self, params: &[f64], idx: &[usize]) -> Result<(f64, ParamVector)> {
        let batch = self.data.subset(idx);
        let (v, g) = ErmLoss {
            loss: self.loss,
            model: self.model,
            batch: &batch,
        }
        .value_and_grad(params);
        Ok((v, ParamVector::new(g)))
    }
}

/// FRM regression trained by SGD. The metric is estimated over a fixed
/// sample of training inputs. In detached mode the weights of every
/// training point are recomputed every `refresh_every` steps and frozen in
/// between. The batch objective is the per-point mean.
///
/// With `normalize`, the objective is also multiplied by the mean weight
/// `mean_i W_i` taken at the last refresh. The quadratic term then has the
/// scale of a squared residual, so ERM and FRM can share one step-size
/// grid. A positive constant factor does not move the minimizer.
pub struct FrmRegressionTask<'a, M> {
    model: &'a M,
    data: &'a Dataset,
    metric_samples: Dataset,
    cfg: ObjectiveConfig,
    weights: Option<DetachedWeights>,
    normalize: bool,
    scale: f64,
    cg_warnings: usize,
}

impl<'a, M: Model> FrmRegressionTask<'a, M> {
    pub fn new(
        model: &'a M,
        data: &'a Dataset,
        metric_samples: Dataset,
        cfg: ObjectiveConfig,
        normalize: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() || metric_samples.is_empty() {
            return Err(contract("FRM training needs data and metric samples"));
        }
        Ok(FrmRegressionTask {
            model,
            data,
            metric_samples,
            cfg,
            weights: None,
            normalize,
            scale: 1.0,
            cg_warnings: 0,
        })
    }

    fn recompute(&mut self, params: &[f64]) -> Result<()> {
        let op = build_metric(self.model, params, LossKind::Mse, &self.metric_samples, self.cfg.damping)?;
        let w = if op.dim() <= DEFAULT_DENSE_CAP {
            DetachedWeights::compute_dense(self.model, params, self.data, &DenseFactor::new(&op, DEFAULT_DENSE_CAP)?)?
        } else {
            DetachedWeights::compute(self.model, params, self.data, &op, &self.cfg.cg)?
        };
        self.cg_warnings += w.cg_warnings;
        if self.normalize {
            // mean_i tr(W_i)/d_out, read off the stored inverses
            let total: f64 = w
                .inverses
                .iter()
                .map(|inv| inv.clone().try_inverse().map_or(f64::NAN, |m| m.trace() / m.nrows() as f64))
                .sum();
            let mean = total / w.len() as f64;
            if !(mean > 0.0 && mean.is_finite()) {
                return Err(crate::error::FrmError::Numerical("mean weight is not positive".into()));
            }
            self.scale = mean;
        }
        self.weights = Some(w);
        Ok(())
    }
}

impl<M: Model> Trainable for FrmRegressionTask<'_, M> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn num_points(&self) -> usize {
        self.data.len()
    }

    fn refresh(&mut self, step: usize, params: &[f64]) -> Result<()> {
        if self.weights.is_none() || step % self.cfg.refresh_every == 0 {
            self.recompute(params)?;
        }
        Ok(())
    }

    fn batch_value_and_grad(&mut self, params: &[f64], idx: &[usize]) -> Result<(f64, ParamVector)> {
        let batch = self.data.subset(idx);
        let scale = self.scale / idx.len() as f64;
        match self.cfg.weight_mode {
            WeightMode::Detached => {
                let frozen = self
                    .weights
                    .as_ref()
                    .ok_or_else(|| contract("weights requested before the first refresh"))?
                    .subset(idx);
                let v = weight_form_value(self.model, params, &batch, &frozen, self.cfg.include_logdet)?;
                let mut g = weight_form_gradient(self.model, params, &batch, &frozen)?;
                g.scale(scale);
                Ok((v.value * scale, g))
            }
            WeightMode::Implicit => {
                let op = build_metric(self.model, params, LossKind::Mse, &self.metric_samples, self.cfg.damping)?;
                let v = crate::objectives::frm_regression_objective(self.model, params, &batch, &op, &self.cfg)?;
                self.cg_warnings += v.cg_warnings;
                let mut g = frm_regression_gradient(self.model, params, &batch, &op, &self.cfg)?;
                g.scale(scale);
                Ok((v.value * scale, g))
            }
        }
    }

    fn cg_warnings(&self) -> usize {
        self.cg_warnings
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::AffineModel;
    use crate::objectives::fit_erm_linear;
    use crate::optim::{train, TrainConfig};

    #[test]
    fn erm_affine_reaches_normal_equations() {
        let data = Dataset::from_pairs(&[(1.0, 2.0), (2.0, 3.0), (3.0, 5.0)]);
        let model = AffineModel::new(1);
        let exact = fit_erm_linear(&data).unwrap().params.flatten();
        let cfg = TrainConfig {
            batch_size: 256,
            steps: 3000,
            step_sizes: vec![0.05],
            momentum: 0.9,
            seed: 0,
            eval_every: 1000,
        };
        let mut task = ErmTask {
            loss: LossKind::Mse,
            model: &model,
            data: &data,
        };
        let t = train(&mut task, &[0.0, 0.0], &cfg, 0.05, |_| 0.0).unwrap();
        for (a, b) in t.final_params.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let pairs: Vec<(f64, f64)> = (0..50).map(|i| (i as f64 / 25.0 - 1.0, (i * 7 % 11) as f64 / 11.0)).collect();
        let data = Dataset::from_pairs(&pairs);
        let model = AffineModel::new(1);
        let cfg = TrainConfig {
            batch_size: 8,
            steps: 200,
            step_sizes: vec![0.01],
            seed: 42,
            eval_every: 20,
            ..TrainConfig::default()
        };
        let run = || {
            let mut task =
                FrmRegressionTask::new(&model, &data, data.clone(), ObjectiveConfig::linear(), true).unwrap();
            train(&mut task, &[0.0, 0.0], &cfg, 0.01, |p| p[0]).unwrap()
        };
        assert_eq!(run(), run());
    }
}
