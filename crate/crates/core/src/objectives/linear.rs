//! Exact FRM for affine models under squared error.
//!
//! Both the Jacobian `[x, 1]` and the metric are independent of the
//! parameters, so the log-determinant is constant and the objective reduces
//! to a weighted least-squares problem with weights `1 / ([x,1] H⁻¹ [x,1]ᵀ)`.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::LabeledBatch;
use crate::diff::SmoothFn;
use crate::error::{contract, FrmError, Result};
use crate::models::AffineParams;
use crate::scalar::Scalar;

fn augmented(x: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.len() + 1, x.iter().copied().chain(std::iter::once(1.0)))
}

/// `H = E_x[[x,1]ᵀ[x,1]]` over the batch inputs, without the factor 2 of
/// the literal second derivative.
pub fn affine_gram(batch: &LabeledBatch) -> DMatrix<f64> {
    let p = batch.input_dim() + 1;
    let mut h = DMatrix::zeros(p, p);
    for i in 0..batch.len() {
        let a = augmented(batch.input(i));
        h.ger(1.0, &a, &a, 1.0);
    }
    h / batch.len() as f64
}

/// `w_i = [x_i,1] H⁻¹ [x_i,1]ᵀ` for every point.
pub fn linear_frm_weights(batch: &LabeledBatch, h: &DMatrix<f64>) -> Result<Vec<f64>> {
    let p = batch.input_dim() + 1;
    if h.shape() != (p, p) {
        return Err(contract(format!("metric has shape {:?}, expected {p}×{p}", h.shape())));
    }
    let chol = Cholesky::new(h.clone()).ok_or_else(|| FrmError::Singular("metric is not positive definite".into()))?;
    Ok((0..batch.len())
        .map(|i| {
            let a = augmented(batch.input(i));
            a.dot(&chol.solve(&a))
        })
        .collect())
}

fn check_affine(batch: &LabeledBatch, slope: &[f64]) -> Result<()> {
    if batch.output_dim() != 1 || slope.len() != batch.input_dim() {
        return Err(contract("affine FRM needs scalar targets and a slope per input"));
    }
    Ok(())
}

/// `Σ_i (λ·x_i + β − y_i)² / w_i`.
pub fn frm_linear_objective(batch: &LabeledBatch, slope: &[f64], offset: f64, h: &DMatrix<f64>) -> Result<f64> {
    check_affine(batch, slope)?;
    let w = linear_frm_weights(batch, h)?;
    Ok((0..batch.len())
        .map(|i| {
            let r = residual(batch, i, slope, offset);
            r * r / w[i]
        })
        .sum())
}

fn residual(batch: &LabeledBatch, i: usize, slope: &[f64], offset: f64) -> f64 {
    let x = batch.input(i);
    slope.iter().zip(x).map(|(l, x)| l * x).sum::<f64>() + offset - batch.target(i)[0]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub params: AffineParams,
    /// The normal equations were singular and a small ridge was added.
    pub damped: bool,
}

/// Minimizes `Σ c_i (λ·x_i + β − y_i)²` via the normal equations.
pub fn fit_weighted_linear(batch: &LabeledBatch, weights: &[f64]) -> Result<LinearFit> {
    if batch.is_empty() || batch.output_dim() != 1 || weights.len() != batch.len() {
        return Err(contract("weighted fit needs scalar targets and one weight per point"));
    }
    let p = batch.input_dim() + 1;
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for i in 0..batch.len() {
        let x = augmented(batch.input(i));
        a.ger(weights[i], &x, &x, 1.0);
        b.axpy(weights[i] * batch.target(i)[0], &x, 1.0);
    }
    let (sol, damped) = match Cholesky::new(a.clone()).filter(well_conditioned) {
        Some(ch) => (ch.solve(&b), false),
        None => {
            let ridge = 1e-10 * a.trace().max(1e-300) / p as f64;
            let damped_a = &a + DMatrix::identity(p, p) * ridge;
            let ch = Cholesky::new(damped_a).ok_or_else(|| FrmError::Singular("normal equations".into()))?;
            (ch.solve(&b), true)
        }
    };
    let params = AffineParams::unflatten(sol.as_slice())?;
    Ok(LinearFit { params, damped })
}

/// Rejects factorizations whose pivots collapsed to rounding level.
fn well_conditioned(ch: &Cholesky<f64, nalgebra::Dyn>) -> bool {
    let d = ch.l_dirty().diagonal();
    let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    lo > 1e-7 * hi
}

pub fn fit_erm_linear(batch: &LabeledBatch) -> Result<LinearFit> {
    fit_weighted_linear(batch, &vec![1.0; batch.len()])
}

/// Exact minimizer of [`frm_linear_objective`].
pub fn fit_frm_linear(batch: &LabeledBatch, h: &DMatrix<f64>) -> Result<LinearFit> {
    let w = linear_frm_weights(batch, h)?;
    let inv: Vec<f64> = w.iter().map(|w| 1.0 / w).collect();
    fit_weighted_linear(batch, &inv)
}

/// [`frm_linear_objective`] as a function of the flat affine parameters.
pub struct FrmLinear<'a> {
    batch: &'a LabeledBatch,
    weights: Vec<f64>,
}

impl<'a> FrmLinear<'a> {
    pub fn new(batch: &'a LabeledBatch, h: &DMatrix<f64>) -> Result<Self> {
        Ok(FrmLinear {
            batch,
            weights: linear_frm_weights(batch, h)?,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl SmoothFn for FrmLinear<'_> {
    fn dim(&self) -> usize {
        self.batch.input_dim() + 1
    }

    fn value_and_grad<T: Scalar>(&self, at: &[T]) -> (T, Vec<T>) {
        let d = self.batch.input_dim();
        let mut value = T::zero();
        let mut grad = vec![T::zero(); d + 1];
        for i in 0..self.batch.len() {
            let x = self.batch.input(i);
            let mut r = at[d] - T::from_f64(self.batch.target(i)[0]);
            for (l, &xi) in at.iter().zip(x) {
                r += l.scale(xi);
            }
            let c = 1.0 / self.weights[i];
            value += (r * r).scale(c);
            let g = r.scale(2.0 * c);
            for (gj, &xi) in grad.iter_mut().zip(x) {
                *gj += g.scale(xi);
            }
            grad[d] += g;
        }
        (value, grad)
    }
}
