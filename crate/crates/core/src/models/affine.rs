use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{contract, Result};
use crate::scalar::Scalar;

/// `f(x) = λ·x + β`, parameters flattened as `(λ…, β)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineModel {
    pub input_dim: usize,
}

impl AffineModel {
    pub fn new(input_dim: usize) -> Self {
        AffineModel { input_dim }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub slope: Vec<f64>,
    pub offset: f64,
}

impl AffineParams {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.slope.clone();
        v.push(self.offset);
        v
    }

    pub fn unflatten(values: &[f64]) -> Result<Self> {
        let (offset, slope) = values
            .split_last()
            .ok_or_else(|| contract("affine parameters need at least the offset"))?;
        Ok(AffineParams {
            slope: slope.to_vec(),
            offset: *offset,
        })
    }
}

impl Model for AffineModel {
    fn num_params(&self) -> usize {
        self.input_dim + 1
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn forward<T: Scalar>(&self, params: &[T], x: &[f64]) -> Vec<T> {
        let mut acc = params[self.input_dim];
        for (p, &xi) in params.iter().zip(x) {
            acc += p.scale(xi);
        }
        vec![acc]
    }

    fn vjp<T: Scalar>(&self, _params: &[T], x: &[f64], w: &[T]) -> Vec<T> {
        let mut g: Vec<T> = x.iter().map(|&xi| w[0].scale(xi)).collect();
        g.push(w[0]);
        g
    }
}

/// `f(x) = θ·x` with no offset. Used for fixed feature maps such as the
/// TD difference features, where the input already is the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearFeatureModel {
    pub num_features: usize,
}

impl Model for LinearFeatureModel {
    fn num_params(&self) -> usize {
        self.num_features
    }

    fn input_dim(&self) -> usize {
        self.num_features
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn forward<T: Scalar>(&self, params: &[T], x: &[f64]) -> Vec<T> {
        let mut acc = T::zero();
        for (p, &xi) in params.iter().zip(x) {
            acc += p.scale(xi);
        }
        vec![acc]
    }

    fn vjp<T: Scalar>(&self, _params: &[T], x: &[f64], w: &[T]) -> Vec<T> {
        x.iter().map(|&xi| w[0].scale(xi)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::eval;

    #[test]
    fn affine_eval() {
        let m = AffineModel::new(1);
        assert_eq!(eval(&m, &[1.0, 1.0], &[3.0]).unwrap(), vec![4.0]);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let m = AffineModel::new(2);
        assert!(eval(&m, &[1.0, 1.0], &[3.0, 1.0]).is_err());
        assert!(eval(&m, &[1.0, 1.0, 0.0], &[3.0]).is_err());
    }

    #[test]
    fn flatten_order_is_slope_then_offset() {
        let p = AffineParams {
            slope: vec![2.0, -1.0],
            offset: 0.5,
        };
        assert_eq!(p.flatten(), vec![2.0, -1.0, 0.5]);
        assert_eq!(AffineParams::unflatten(&p.flatten()).unwrap(), p);
    }
}
