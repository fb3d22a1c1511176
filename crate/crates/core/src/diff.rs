//! Exact first and second derivatives for the registered model and loss
//! compositions, plus the finite-difference oracle used to validate them.

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{contract, FrmError, Result};
use crate::models::{check_shapes, Model};
use crate::param::ParamVector;
use crate::scalar::{Dual, Scalar};

/// A scalar function whose value and gradient can be evaluated for any
/// [`Scalar`]. Evaluating with [`Dual`] arguments differentiates the
/// gradient code itself, which gives exact Hessian-vector products.
pub trait SmoothFn {
    fn dim(&self) -> usize;
    fn value_and_grad<T: Scalar>(&self, at: &[T]) -> (T, Vec<T>);
}

/// A scalar function with an exact `f64` gradient.
pub trait ScalarFn {
    fn dim(&self) -> usize;
    fn value(&self, at: &[f64]) -> Result<f64>;
    fn gradient(&self, at: &[f64]) -> Result<ParamVector>;
}

/// Adapts a [`SmoothFn`] to [`ScalarFn`].
pub struct Exact<F>(pub F);

impl<F: SmoothFn> ScalarFn for Exact<F> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn value(&self, at: &[f64]) -> Result<f64> {
        Ok(self.0.value_and_grad(at).0)
    }

    fn gradient(&self, at: &[f64]) -> Result<ParamVector> {
        scalar_gradient(&self.0, at)
    }
}

fn check_dim(dim: usize, len: usize) -> Result<()> {
    if dim != len {
        return Err(contract(format!("function takes {dim} parameters, got {len}")));
    }
    Ok(())
}

fn first_non_finite(values: &[f64]) -> Option<usize> {
    values.iter().position(|v| !v.is_finite())
}

pub fn scalar_gradient<F: SmoothFn + ?Sized>(f: &F, at: &[f64]) -> Result<ParamVector> {
    check_dim(f.dim(), at.len())?;
    if let Some(index) = first_non_finite(at) {
        return Err(FrmError::NonFinite {
            index,
            context: "evaluation point".into(),
        });
    }
    let (value, grad) = f.value_and_grad(at);
    if let Some(index) = first_non_finite(&grad) {
        return Err(FrmError::NonFinite {
            index,
            context: "gradient".into(),
        });
    }
    if !value.is_finite() {
        return Err(FrmError::Numerical(format!("function value {value} is not finite")));
    }
    Ok(ParamVector::new(grad))
}

/// `∇²f(at)·v` by forward-mode differentiation of the exact gradient.
pub fn hvp<F: SmoothFn + ?Sized>(f: &F, at: &[f64], v: &[f64]) -> Result<ParamVector> {
    check_dim(f.dim(), at.len())?;
    check_dim(f.dim(), v.len())?;
    if let Some(index) = first_non_finite(v) {
        return Err(FrmError::NonFinite {
            index,
            context: "direction vector".into(),
        });
    }
    let seeded = Dual::seed(at, v);
    let (_, grad) = f.value_and_grad(&seeded);
    let out: Vec<f64> = grad.iter().map(|d| d.eps).collect();
    if let Some(index) = first_non_finite(&out) {
        return Err(FrmError::NonFinite {
            index,
            context: "Hessian-vector product".into(),
        });
    }
    Ok(ParamVector::new(out))
}

/// Output Jacobian `∂f_θ(x)/∂θ` (`d_out × P`) by one reverse pass per output.
pub fn output_jacobian<M: Model>(model: &M, params: &[f64], x: &[f64]) -> Result<DMatrix<f64>> {
    check_shapes(model, params.len(), x)?;
    let d_out = model.output_dim();
    let p = model.num_params();
    let mut jac = DMatrix::zeros(d_out, p);
    let mut w = vec![0.0; d_out];
    for k in 0..d_out {
        w.iter_mut().for_each(|v| *v = 0.0);
        w[k] = 1.0;
        let row = model.vjp(params, x, &w);
        if let Some(index) = first_non_finite(&row) {
            return Err(FrmError::NonFinite {
                index,
                context: format!("Jacobian row {k}"),
            });
        }
        for (j, v) in row.into_iter().enumerate() {
            jac[(k, j)] = v;
        }
    }
    Ok(jac)
}

/// Jacobian-vector product `J(x)·v` in forward mode.
pub fn jvp<M: Model>(model: &M, params: &[f64], x: &[f64], v: &[f64]) -> Vec<f64> {
    let seeded = Dual::seed(params, v);
    model.forward(&seeded, x).iter().map(|d| d.eps).collect()
}

/// `Σ_c w_c ∇²_θ f_c(x) · u`: second derivative of the model output
/// contracted with an output weight `w` and a parameter direction `u`.
pub fn output_hvp<M: Model>(model: &M, params: &[f64], x: &[f64], w: &[f64], u: &[f64]) -> Vec<f64> {
    let seeded = Dual::seed(params, u);
    let wd: Vec<Dual> = w.iter().map(|&c| Dual::constant(c)).collect();
    model.vjp(&seeded, x, &wd).iter().map(|d| d.eps).collect()
}

/// Central finite differences with step `1e-5·max(1, |θ_j|)`.
pub fn finite_difference_gradient<F: ScalarFn + ?Sized>(f: &F, at: &[f64]) -> Result<Vec<f64>> {
    let mut probe = at.to_vec();
    let mut out = Vec::with_capacity(at.len());
    for j in 0..at.len() {
        let h = 1e-5 * at[j].abs().max(1.0);
        probe[j] = at[j] + h;
        let up = f.value(&probe)?;
        probe[j] = at[j] - h;
        let down = f.value(&probe)?;
        probe[j] = at[j];
        // use the realized step to cancel representation error in θ ± h
        out.push((up - down) / ((at[j] + h) - (at[j] - h)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

/// Compares the exact gradient with central differences.
///
/// The relative error of coordinate `j` is `|g_j − fd_j| / max(1, |g_j|, |fd_j|)`,
/// which degrades to an absolute error for small gradients.
pub fn check_gradient<F: ScalarFn + ?Sized>(f: &F, at: &[f64], tol: f64) -> GradCheckReport {
    assert!(tol > 0.0, "gradient-check tolerance must be positive");
    let failed = GradCheckReport {
        max_rel_error: f64::INFINITY,
        max_abs_error: f64::INFINITY,
        passed: false,
    };
    let (exact, fd) = match (f.gradient(at), finite_difference_gradient(f, at)) {
        (Ok(g), Ok(fd)) => (g, fd),
        _ => return failed,
    };
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (a, b) in exact.iter().zip(&fd) {
        let abs = (a - b).abs();
        let rel = abs / a.abs().max(b.abs()).max(1.0);
        if !abs.is_finite() {
            return failed;
        }
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        passed: max_rel < tol,
    }
}

/// `θ·θ`.
#[derive(Debug, Clone, Copy)]
pub struct SquaredNorm {
    pub dim: usize,
}

impl SmoothFn for SquaredNorm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_grad<T: Scalar>(&self, at: &[T]) -> (T, Vec<T>) {
        let mut v = T::zero();
        for &a in at {
            v += a * a;
        }
        (v, at.iter().map(|&a| a.scale(2.0)).collect())
    }
}

/// Output component `k` of a model at a fixed input, as a function of θ.
pub struct ModelOutput<'a, M> {
    pub model: &'a M,
    pub x: &'a [f64],
    pub component: usize,
}

impl<M: Model> SmoothFn for ModelOutput<'_, M> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn value_and_grad<T: Scalar>(&self, at: &[T]) -> (T, Vec<T>) {
        let out = self.model.forward(at, self.x);
        let mut w = vec![T::zero(); self.model.output_dim()];
        w[self.component] = T::from_f64(1.0);
        (out[self.component], self.model.vjp(at, self.x, &w))
    }
}

/// Mean squared error of a model over a dataset (sum over output
/// components, mean over points).
pub struct MeanSquaredError<'a, M> {
    pub model: &'a M,
    pub data: &'a Dataset,
}

impl<M: Model> SmoothFn for MeanSquaredError<'_, M> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn value_and_grad<T: Scalar>(&self, at: &[T]) -> (T, Vec<T>) {
        let n = self.data.len();
        let scale = 1.0 / n as f64;
        let mut loss = T::zero();
        let mut grad = vec![T::zero(); at.len()];
        for i in 0..n {
            let x = self.data.input(i);
            let out = self.model.forward(at, x);
            let resid: Vec<T> = out
                .iter()
                .zip(self.data.target(i))
                .map(|(&f, &y)| f - T::from_f64(y))
                .collect();
            for &r in &resid {
                loss += (r * r).scale(scale);
            }
            let w: Vec<T> = resid.iter().map(|&r| r.scale(2.0 * scale)).collect();
            for (g, d) in grad.iter_mut().zip(self.model.vjp(at, x, &w)) {
                *g += d;
            }
        }
        (loss, grad)
    }
}
