use crate::data::LabeledBatch;
use crate::diff::{scalar_gradient, SmoothFn};
use crate::error::{contract, Result};
use crate::metric::LossKind;
use crate::models::Model;
use crate::param::ParamVector;
use crate::scalar::Scalar;

/// Mean task loss over a batch.
///
/// * mse: squared residual summed over outputs
/// * bce: binary cross-entropy on a single logit, labels in `{0, 1}`
/// * td: the batch holds difference features `ψ` as inputs and rewards as
///   targets; the loss is the squared TD error `(θ·ψ − r)²`
pub struct ErmLoss<'a, M> {
    pub loss: LossKind,
    pub model: &'a M,
    pub batch: &'a LabeledBatch,
}

fn stable_sigmoid<T: Scalar>(f: T) -> T {
    let one = T::from_f64(1.0);
    if f.value() >= 0.0 {
        one / (one + (-f).exp())
    } else {
        let e = f.exp();
        e / (one + e)
    }
}

fn softplus<T: Scalar>(f: T) -> T {
    let one = T::from_f64(1.0);
    if f.value() > 0.0 {
        f + (one + (-f).exp()).ln()
    } else {
        (one + f.exp()).ln()
    }
}

impl<M: Model> SmoothFn for ErmLoss<'_, M> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn value_and_grad<T: Scalar>(&self, at: &[T]) -> (T, Vec<T>) {
        let n = self.batch.len();
        let scale = 1.0 / n as f64;
        let mut loss = T::zero();
        let mut grad = vec![T::zero(); at.len()];
        for i in 0..n {
            let x = self.batch.input(i);
            let y = self.batch.target(i);
            let out = self.model.forward(at, x);
            let w: Vec<T> = match self.loss {
                LossKind::Mse | LossKind::Td => out
                    .iter()
                    .zip(y)
                    .map(|(&f, &t)| {
                        let r = f - T::from_f64(t);
                        loss += (r * r).scale(scale);
                        r.scale(2.0 * scale)
                    })
                    .collect(),
                LossKind::Bce => {
                    let f = out[0];
                    loss += (softplus(f) - f.scale(y[0])).scale(scale);
                    vec![(stable_sigmoid(f) - T::from_f64(y[0])).scale(scale)]
                }
            };
            for (g, d) in grad.iter_mut().zip(self.model.vjp(at, x, &w)) {
                *g += d;
            }
        }
        (loss, grad)
    }
}

fn validate<M: Model>(loss: LossKind, model: &M, params: &[f64], batch: &LabeledBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    if params.len() != model.num_params() {
        return Err(contract("parameter length does not match the model"));
    }
    if batch.input_dim() != model.input_dim() || batch.output_dim() != model.output_dim() {
        return Err(contract(format!(
            "batch shape ({}, {}) does not match model ({}, {})",
            batch.input_dim(),
            batch.output_dim(),
            model.input_dim(),
            model.output_dim()
        )));
    }
    if loss == LossKind::Bce && model.output_dim() != 1 {
        return Err(contract("bce needs a single logit output"));
    }
    Ok(())
}

pub fn erm_objective<M: Model>(loss: LossKind, model: &M, params: &[f64], batch: &LabeledBatch) -> Result<f64> {
    validate(loss, model, params, batch)?;
    Ok(ErmLoss { loss, model, batch }.value_and_grad(params).0)
}

pub fn erm_gradient<M: Model>(loss: LossKind, model: &M, params: &[f64], batch: &LabeledBatch) -> Result<ParamVector> {
    validate(loss, model, params, batch)?;
    scalar_gradient(&ErmLoss { loss, model, batch }, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::models::AffineModel;

    #[test]
    fn perfect_fit_is_zero() {
        let batch = Dataset::from_pairs(&[(1.0, 2.0), (2.0, 3.0)]);
        assert_eq!(erm_objective(LossKind::Mse, &AffineModel::new(1), &[1.0, 1.0], &batch).unwrap(), 0.0);
    }

    #[test]
    fn three_point_mean_squared_residual() {
        let batch = Dataset::from_pairs(&[(1.0, 2.0), (2.0, 3.0), (3.0, 5.0)]);
        let v = erm_objective(LossKind::Mse, &AffineModel::new(1), &[1.0, 1.0], &batch).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let batch = Dataset::from_pairs(&[(0.0, 1.0), (0.0, 0.0)]);
        let v = erm_objective(LossKind::Bce, &AffineModel::new(1), &[0.0, 0.0], &batch).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let batch = Dataset::new(2, 1, vec![1.0, 2.0], vec![0.0]).unwrap();
        assert!(erm_objective(LossKind::Mse, &AffineModel::new(1), &[1.0, 1.0], &batch).is_err());
    }
}
