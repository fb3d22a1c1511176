//! FRM for linear value estimation with 1-step TD errors.
//!
//! The TD error `θ·φ(s) − r − γθ·φ(s')` is linear in θ with difference
//! features `ψ = φ(s) − γφ(s')`, so TD learning is a linear regression of
//! rewards on `ψ` and the exact linear FRM weights apply. Terminal
//! transitions bootstrap from zero, so `ψ = φ(s)`.

use nalgebra::{Cholesky, DMatrix};

use crate::data::Dataset;
use crate::error::{contract, FrmError, Result};
use crate::models::RbfLinearModel;
use crate::mountain_car::Transition;
use crate::param::ParamVector;

/// Difference features as inputs and rewards as targets.
pub fn td_design(model: &RbfLinearModel, transitions: &[Transition], gamma: f64) -> Result<Dataset> {
    if transitions.is_empty() {
        return Err(contract("no transitions"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(contract(format!("discount must lie in [0, 1], got {gamma}")));
    }
    let p = model.grid.len() + usize::from(model.bias);
    let mut inputs = Vec::with_capacity(transitions.len() * p);
    let mut targets = Vec::with_capacity(transitions.len());
    for t in transitions {
        let mut psi = model.features(t.s.normalized());
        if !t.terminal {
            for (a, b) in psi.iter_mut().zip(model.features(t.next.normalized())) {
                *a -= gamma * b;
            }
        }
        inputs.extend(psi);
        targets.push(t.r);
    }
    Dataset::new(p, 1, inputs, targets)
}

/// `w_i = ψ_iᵀ (H + εI)⁻¹ ψ_i` with `H = (1/n) Σ ψψᵀ`.
fn td_weights(design: &Dataset, eps: f64) -> Result<Vec<f64>> {
    let (n, p) = (design.len(), design.input_dim());
    let psi = DMatrix::from_row_slice(n, p, design.inputs());
    let mut h = psi.tr_mul(&psi) / n as f64;
    for k in 0..p {
        h[(k, k)] += eps;
    }
    let chol = Cholesky::new(h).ok_or_else(|| FrmError::Singular("TD metric; add damping".into()))?;
    let solved = chol.solve(&psi.transpose());
    Ok((0..n).map(|i| psi.row(i).transpose().dot(&solved.column(i))).collect())
}

/// TD-FRM over a fixed offline dataset: the weights depend only on the
/// features, so they are computed once.
#[derive(Debug, Clone)]
pub struct TdFrm {
    design: Dataset,
    /// Per-transition loss multiplier `1/w_i`, possibly rescaled.
    coeffs: Vec<f64>,
}

impl TdFrm {
    /// With `normalize`, the multipliers are rescaled to mean 1. This leaves
    /// the minimizer unchanged and puts gradients on the same scale as the
    /// unweighted TD loss, so both methods can share one step-size grid.
    pub fn new(design: Dataset, eps: f64, normalize: bool) -> Result<Self> {
        if design.is_empty() || design.output_dim() != 1 {
            return Err(contract("TD design needs at least one transition and scalar rewards"));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(contract("damping must be finite and nonnegative"));
        }
        let weights = td_weights(&design, eps)?;
        let mut coeffs: Vec<f64> = weights.iter().map(|w| 1.0 / w).collect();
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(FrmError::Numerical("a transition has zero weight".into()));
        }
        if normalize {
            let mean = coeffs.iter().sum::<f64>() / coeffs.len() as f64;
            coeffs.iter_mut().for_each(|c| *c /= mean);
        }
        Ok(TdFrm { design, coeffs })
    }

    /// Plain TD learning on the same design: every multiplier is 1.
    pub fn unweighted(design: Dataset) -> Self {
        let coeffs = vec![1.0; design.len()];
        TdFrm { design, coeffs }
    }

    pub fn design(&self) -> &Dataset {
        &self.design
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn dim(&self) -> usize {
        self.design.input_dim()
    }

    fn td_error(&self, theta: &[f64], i: usize) -> f64 {
        crate::param::dot(theta, self.design.input(i)) - self.design.target(i)[0]
    }

    /// `Σ_i c_i (θ·ψ_i − r_i)²`.
    pub fn objective(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.dim() {
            return Err(contract("parameter length does not match the feature count"));
        }
        Ok((0..self.design.len())
            .map(|i| self.coeffs[i] * self.td_error(theta, i).powi(2))
            .sum())
    }

    /// Mean weighted loss and its gradient over the listed transitions.
    pub fn batch_value_and_grad(&self, theta: &[f64], idx: &[usize]) -> Result<(f64, ParamVector)> {
        if theta.len() != self.dim() || idx.is_empty() {
            return Err(contract("bad parameter length or empty batch"));
        }
        let scale = 1.0 / idx.len() as f64;
        let mut value = 0.0;
        let mut grad = ParamVector::zeros(self.dim());
        for &i in idx {
            let e = self.td_error(theta, i);
            value += scale * self.coeffs[i] * e * e;
            grad.axpy(2.0 * scale * self.coeffs[i] * e, self.design.input(i));
        }
        Ok((value, grad))
    }
}

/// `Σ_i (θ·ψ_i − r_i)² / (ψ_iᵀ(H+εI)⁻¹ψ_i)` over the transitions.
pub fn frm_td_objective(
    theta: &[f64],
    transitions: &[Transition],
    model: &RbfLinearModel,
    gamma: f64,
    eps: f64,
) -> Result<f64> {
    TdFrm::new(td_design(model, transitions, gamma)?, eps, false)?.objective(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{GridKind, RbfGrid};
    use crate::mountain_car::{Action, McState};
    use crate::objectives::{frm_linear_objective, affine_gram};

    fn one_center() -> RbfLinearModel {
        RbfLinearModel::new(
            RbfGrid {
                centers: vec![[0.5, 0.5]],
                bandwidths: vec![0.3],
                kind: GridKind::Uniform,
            },
            true,
        )
    }

    fn transitions() -> Vec<Transition> {
        let t = |p0: f64, v0: f64, p1: f64, v1: f64, terminal| Transition {
            s: McState::new(p0, v0),
            a: Action::Forward,
            r: -1.0,
            next: McState::new(p1, v1),
            terminal,
        };
        vec![
            t(-0.5, 0.0, -0.49, 0.01, false),
            t(-1.0, -0.05, -1.05, -0.04, false),
            t(0.45, 0.06, 0.51, 0.06, true),
        ]
    }

    #[test]
    fn zero_discount_reduces_to_linear_frm() {
        let model = one_center();
        let ts = transitions();
        let theta = [2.0, -0.7];
        let td = frm_td_objective(&theta, &ts, &model, 0.0, 0.0).unwrap();
        let pairs: Vec<(f64, f64)> = ts.iter().map(|t| (model.features(t.s.normalized())[0], t.r)).collect();
        let batch = Dataset::from_pairs(&pairs);
        let lin = frm_linear_objective(&batch, &theta[..1], theta[1], &affine_gram(&batch)).unwrap();
        assert!((td - lin).abs() < 1e-10 * lin.abs().max(1.0));
    }

    #[test]
    fn exact_td_solution_gives_zero() {
        // two independent features and two transitions: the TD equations are square
        let model = one_center();
        let ts = &transitions()[..2];
        let design = td_design(&model, ts, 0.9).unwrap();
        let psi = DMatrix::from_row_slice(2, 2, design.inputs());
        let r = nalgebra::DVector::from_column_slice(design.targets());
        let theta = psi.lu().solve(&r).unwrap();
        let v = frm_td_objective(theta.as_slice(), ts, &model, 0.9, 0.0).unwrap();
        assert!(v.abs() < 1e-20);
    }

    #[test]
    fn hand_inverse_with_two_features() {
        let model = one_center();
        let ts = transitions();
        let gamma = 0.9;
        let theta = [0.3, -4.0];
        let psi: Vec<[f64; 2]> = ts
            .iter()
            .map(|t| {
                let a = model.features(t.s.normalized());
                if t.terminal {
                    [a[0], a[1]]
                } else {
                    let b = model.features(t.next.normalized());
                    [a[0] - gamma * b[0], a[1] - gamma * b[1]]
                }
            })
            .collect();
        let (mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0);
        for p in &psi {
            h00 += p[0] * p[0] / 3.0;
            h01 += p[0] * p[1] / 3.0;
            h11 += p[1] * p[1] / 3.0;
        }
        let det = h00 * h11 - h01 * h01;
        let (i00, i01, i11) = (h11 / det, -h01 / det, h00 / det);
        let mut expect = 0.0;
        for (p, t) in psi.iter().zip(&ts) {
            let w = p[0] * p[0] * i00 + 2.0 * p[0] * p[1] * i01 + p[1] * p[1] * i11;
            let e = theta[0] * p[0] + theta[1] * p[1] - t.r;
            expect += e * e / w;
        }
        let got = frm_td_objective(&theta, &ts, &model, gamma, 0.0).unwrap();
        assert!((got - expect).abs() < 1e-10 * expect.abs().max(1.0));
    }

    #[test]
    fn normalized_coefficients_average_one() {
        let design = td_design(&one_center(), &transitions(), 0.99).unwrap();
        let td = TdFrm::new(design, 1e-6, true).unwrap();
        let mean = td.coeffs().iter().sum::<f64>() / 3.0;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn terminal_transition_uses_current_features_only() {
        let model = one_center();
        let ts = transitions();
        let design = td_design(&model, &ts, 0.99).unwrap();
        assert_eq!(design.input(2), model.features(ts[2].s.normalized()).as_slice());
    }
}
