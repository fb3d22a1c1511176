//! Parametric function classes `f_θ(x)` with a flat parameter vector.

mod affine;
mod mlp;
mod rbf;

pub use affine::{AffineModel, AffineParams, LinearFeatureModel};
pub use mlp::{MlpModel, MlpParams};
pub use rbf::{axis_nodes, build_rbf_grid, rbf_features, GridKind, RbfGrid, RbfLinearModel};

use crate::error::{contract, Result};
use crate::scalar::Scalar;

/// A differentiable model.
///
/// `forward` and `vjp` are generic over [`Scalar`] so that the same code
/// produces values, exact gradients (`f64`) and exact second-order
/// products (`Dual` parameters).
pub trait Model: Send + Sync {
    fn num_params(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    fn forward<T: Scalar>(&self, params: &[T], x: &[f64]) -> Vec<T>;

    /// Vector-Jacobian product `J(x)ᵀ w`, length `num_params`.
    fn vjp<T: Scalar>(&self, params: &[T], x: &[f64], w: &[T]) -> Vec<T>;

    /// Starting point for gradient training; zeros unless overridden.
    fn init_params<R: rand::Rng>(&self, _rng: &mut R) -> Vec<f64> {
        vec![0.0; self.num_params()]
    }
}

pub(crate) fn check_shapes<M: Model + ?Sized>(model: &M, params_len: usize, x: &[f64]) -> Result<()> {
    if params_len != model.num_params() {
        return Err(contract(format!(
            "parameter vector has length {params_len}, model expects {}",
            model.num_params()
        )));
    }
    if x.len() != model.input_dim() {
        return Err(contract(format!(
            "input has dimension {}, model expects {}",
            x.len(),
            model.input_dim()
        )));
    }
    Ok(())
}

/// Checked evaluation of `f_θ(x)`.
pub fn eval<M: Model>(model: &M, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_shapes(model, params.len(), x)?;
    Ok(model.forward(params, x))
}
