//! Trainable objectives: ERM baselines, exact linear FRM, Taylor-approximated
//! FRM for regression and binary classification, TD-FRM, and diagnostics.

mod adaptation;
mod classification;
mod erm;
mod gumbel;
mod linear;
mod regression;
mod td;

pub use adaptation::{minimal_adaptation_norm, AdaptationNorm};
pub use classification::{
    frm_binary_classification_gradient, frm_binary_classification_objective, ClassificationEval,
    FrmClassification,
};
pub use erm::{erm_gradient, erm_objective, ErmLoss};
pub use gumbel::{gumbel_softmax_check, softmax};
pub use linear::{
    fit_erm_linear, fit_frm_linear, fit_weighted_linear, frm_linear_objective, linear_frm_weights, affine_gram,
    FrmLinear, LinearFit,
};
pub use regression::{
    frm_regression_gradient, frm_regression_objective, weight_form_gradient, weight_form_value, DenseFactor,
    DetachedWeights, FrmRegression, RegressionEval,
};
pub use td::{frm_td_objective, td_design, TdFrm};

use serde::{Deserialize, Serialize};

use crate::linalg::CgConfig;
use crate::metric::Damping;

/// How the gradient treats the per-point weights `W_i`, which depend on θ
/// through both `J_i` and the metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// `W_i` held constant within a step and refreshed every `refresh_every` steps.
    Detached,
    /// Differentiate through `W_i` with the implicit relation
    /// `d(H⁻¹g) = H⁻¹(dg − dH·H⁻¹g)`.
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub weight_mode: WeightMode,
    pub refresh_every: usize,
    pub damping: Damping,
    pub include_logdet: bool,
    pub cg: CgConfig,
}

impl ObjectiveConfig {
    /// Affine and TD models: the log-determinant is constant in θ.
    pub fn linear() -> Self {
        ObjectiveConfig {
            weight_mode: WeightMode::Detached,
            refresh_every: 1,
            damping: Damping::default(),
            include_logdet: false,
            cg: CgConfig::default(),
        }
    }

    /// Nonlinear models: the log-determinant depends on θ.
    pub fn nonlinear() -> Self {
        ObjectiveConfig {
            include_logdet: true,
            ..ObjectiveConfig::linear()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.refresh_every == 0 {
            return Err(crate::error::contract("refresh_every must be at least 1"));
        }
        self.cg.validate()
    }
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig::linear()
    }
}
