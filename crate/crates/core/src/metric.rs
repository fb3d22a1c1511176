//! The functional metric: curvature, in parameter space, of the expected
//! loss between a perturbed model and the unperturbed one.
//!
//! At `Δ = 0` the expected functional distance has a global minimum of zero,
//! so its Hessian is exactly the Gauss-Newton form `Σ c_x J(x)ᵀ J(x)`. The
//! operator keeps the per-sample Jacobian rows and only ever computes
//! matrix-free products with them.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diff::output_jacobian;
use crate::error::{contract, FrmError, Result};
use crate::linalg::LinearOperator;
use crate::models::Model;
use crate::param::{dot, ParamVector};

pub const DEFAULT_DENSE_CAP: usize = 512;
const HUTCHINSON_PROBES: usize = 20;
const HUTCHINSON_SEED: u64 = 0x5eed_0f_7ace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Bce,
    Td,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Bce => "bce",
            LossKind::Td => "td",
        }
    }
}

/// How the damping `ε` added to the metric is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Damping {
    Absolute(f64),
    /// `ε = r · trace(H) / P`, trace estimated with Rademacher probes.
    Relative(f64),
}

impl Default for Damping {
    fn default() -> Self {
        Damping::Relative(1e-4)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Matrix-free `(H + εI)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricOperator {
    dim: usize,
    /// Jacobian rows, `n_rows × dim`, row-major.
    rows: Vec<f64>,
    /// Curvature weight of each row, including the `1/|S|` average.
    coeffs: Vec<f64>,
    damping: f64,
    loss: LossKind,
    params: ParamVector,
    samples: Dataset,
}

impl MetricOperator {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    /// Parameters the metric was linearized at.
    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    /// The inputs that define the empirical expectation over `x`.
    pub fn samples(&self) -> &Dataset {
        &self.samples
    }

    pub fn num_rows(&self) -> usize {
        self.coeffs.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.rows[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_coeff(&self, r: usize) -> f64 {
        self.coeffs[r]
    }

    /// `H·v` without damping.
    pub fn apply_undamped(&self, v: &[f64]) -> ParamVector {
        let mut out = vec![0.0; self.dim];
        for (row, &c) in self.rows.chunks_exact(self.dim).zip(&self.coeffs) {
            let s = c * dot(row, v);
            if s != 0.0 {
                for (o, r) in out.iter_mut().zip(row) {
                    *o += s * r;
                }
            }
        }
        ParamVector::new(out)
    }

    /// `(H + εI)·v`.
    pub fn apply(&self, v: &[f64]) -> ParamVector {
        let mut out = self.apply_undamped(v);
        out.axpy(self.damping, v);
        out
    }

    /// Same operator for the loss scaled by `c > 0` (damping scales too).
    pub fn scaled(&self, c: f64) -> MetricOperator {
        assert!(c > 0.0, "metric scale must be positive");
        let mut op = self.clone();
        op.coeffs.iter_mut().for_each(|w| *w *= c);
        op.damping *= c;
        op
    }

    pub fn with_damping(&self, damping: f64) -> MetricOperator {
        let mut op = self.clone();
        op.damping = damping;
        op
    }

    /// Hutchinson estimate of `trace(H)` with a fixed probe stream.
    pub fn trace_estimate(&self) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(HUTCHINSON_SEED);
        let mut acc = 0.0;
        for _ in 0..HUTCHINSON_PROBES {
            let z: Vec<f64> = (0..self.dim)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            acc += dot(&z, &self.apply_undamped(&z));
        }
        acc / HUTCHINSON_PROBES as f64
    }
}

impl LinearOperator for MetricOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        MetricOperator::apply(self, v).into_inner()
    }
}

/// Builds `H + εI` at `params` for the given loss over the sample inputs.
///
/// * mse: `H = (1/|S|) Σ_x 2 J(x)ᵀ J(x)`
/// * bce (logit output): `H = (1/|S|) Σ_x σ'(f(x)) J(x)ᵀ J(x)`
/// * td: the sample inputs are the difference features `ψ` of a linear
///   model, and `H = (1/|S|) Σ 2 ψψᵀ`, i.e. the mse form over `ψ`.
pub fn build_metric<M: Model>(
    model: &M,
    params: &[f64],
    loss: LossKind,
    samples: &Dataset,
    damping: Damping,
) -> Result<MetricOperator> {
    if samples.is_empty() {
        return Err(contract("metric needs a nonempty sample set"));
    }
    if samples.input_dim() != model.input_dim() {
        return Err(contract("sample inputs do not match the model input dimension"));
    }
    if loss == LossKind::Bce && model.output_dim() != 1 {
        return Err(contract("bce metric needs a single logit output"));
    }
    let dim = model.num_params();
    let m = samples.len() as f64;
    let mut rows = Vec::with_capacity(samples.len() * model.output_dim() * dim);
    let mut coeffs = Vec::with_capacity(samples.len() * model.output_dim());
    for i in 0..samples.len() {
        let x = samples.input(i);
        let jac = output_jacobian(model, params, x)?;
        let c = match loss {
            LossKind::Mse | LossKind::Td => 2.0 / m,
            LossKind::Bce => {
                let s = sigmoid(model.forward(params, x)[0]);
                s * (1.0 - s) / m
            }
        };
        for k in 0..jac.nrows() {
            rows.extend(jac.row(k).iter());
            coeffs.push(c);
        }
    }
    let mut op = MetricOperator {
        dim,
        rows,
        coeffs,
        damping: 0.0,
        loss,
        params: ParamVector::from(params),
        samples: samples.clone(),
    };
    op.damping = match damping {
        Damping::Absolute(eps) => eps,
        Damping::Relative(r) => r * op.trace_estimate() / dim as f64,
    };
    if !(op.damping >= 0.0 && op.damping.is_finite()) {
        return Err(contract(format!("damping must be finite and nonnegative, got {}", op.damping)));
    }
    Ok(op)
}

/// Materializes the operator column by column (`column j = apply(e_j)`).
pub fn dense_metric(op: &MetricOperator, cap: usize) -> Result<DMatrix<f64>> {
    if op.dim() > cap {
        return Err(FrmError::TooLarge { dim: op.dim(), cap });
    }
    let p = op.dim();
    let mut h = DMatrix::zeros(p, p);
    for j in 0..p {
        let col = op.apply(&ParamVector::basis(p, j));
        for (i, v) in col.iter().enumerate() {
            h[(i, j)] = *v;
        }
    }
    Ok(h)
}
