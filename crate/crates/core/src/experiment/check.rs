//! Numerical self-check: one verdict line per library invariant.
//!
//! Every check is deterministic and sized to finish in seconds. The
//! `check.corrupt_gradient` hook perturbs every registered gradient so the
//! gradient checks fail, which exercises the failure path end to end.

use std::fmt;
use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::diff::{check_gradient, hvp, output_jacobian, scalar_gradient, Exact, MeanSquaredError, ScalarFn};
use crate::error::{FrmError, Result};
use crate::linalg::{cg_solve, gaussian_logcdf, weight_matrix, CgConfig, DenseOperator, LinearOperator};
use crate::metric::{build_metric, dense_metric, Damping, LossKind, MetricOperator, DEFAULT_DENSE_CAP};
use crate::models::{
    axis_nodes, build_rbf_grid, AffineModel, AffineParams, GridKind, LinearFeatureModel, MlpModel, MlpParams,
    Model, RbfLinearModel,
};
use crate::mountain_car::{
    collect_transitions, energy_policy, ground_truth_values, sample_visited_states, step, steps_to_goal, Action,
    McState, StartDistribution, VALLEY_STEPS_TO_GOAL,
};
use crate::objectives::{
    fit_erm_linear, fit_frm_linear, fit_weighted_linear, frm_binary_classification_objective,
    frm_linear_objective, frm_regression_objective, gumbel_softmax_check, minimal_adaptation_norm, affine_gram,
    softmax, td_design, weight_form_gradient, weight_form_value, DetachedWeights, ErmLoss, FrmClassification,
    FrmLinear, FrmRegression, ObjectiveConfig, TdFrm, WeightMode,
};
use crate::optim::{train, ErmTask, TrainConfig};
use crate::param::{dot, ParamVector};
use crate::synth::{gen_linear_fgm, gen_mlp_fgm, LinearFgmSpec, MlpFgmSpec, PerturbationScales};

use super::config::{ExperimentConfig, ExperimentKind, Method};
use super::report::{emit_report, linreg_condition, read_rows, read_summary, Rows};
use super::runs::run_linreg;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}/{}: {}", self.module, self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub lines: Vec<CheckLine>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckLine> {
        self.lines.iter().filter(|l| !l.passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.lines.len(), failed)
    }
}

type Outcome = Result<(bool, String)>;

/// Runs every check. A check that errors counts as failed, with the error
/// as its detail; the suite itself never aborts early.
pub fn run_check(cfg: &ExperimentConfig) -> Result<CheckReport> {
    cfg.validate()?;
    if cfg.experiment != ExperimentKind::Check {
        return Err(FrmError::Config(format!("config is for `{}`, not `check`", cfg.experiment)));
    }
    let corrupt = cfg.check.corrupt_gradient;
    let checks: Vec<(&'static str, &'static str, Box<dyn Fn() -> Outcome>)> = vec![
        ("diff-engine", "objective_gradients_match_finite_differences", Box::new(move || gradient_checks(corrupt))),
        ("diff-engine", "hvp_linearity", Box::new(hvp_linearity)),
        ("diff-engine", "hvp_symmetry", Box::new(hvp_symmetry)),
        ("diff-engine", "hvp_matches_dense_hessian", Box::new(hvp_vs_dense)),
        ("models", "flatten_round_trip", Box::new(flatten_round_trip)),
        ("models", "affine_jacobian_is_parameter_free", Box::new(affine_jacobian)),
        ("models", "rbf_construction_order", Box::new(rbf_order)),
        ("functional-metric", "symmetry", Box::new(metric_symmetry)),
        ("functional-metric", "psd_plus_damping", Box::new(metric_psd)),
        ("functional-metric", "scale_covariance", Box::new(metric_scale)),
        ("functional-metric", "td_metric_is_mse_over_differences", Box::new(td_metric)),
        ("linalg-solvers", "cg_agrees_with_dense_solve", Box::new(cg_vs_dense)),
        ("linalg-solvers", "weight_scales_inversely_with_metric", Box::new(weight_scaling)),
        ("linalg-solvers", "logcdf_complement", Box::new(logcdf_complement)),
        ("linalg-solvers", "logcdf_monotone", Box::new(logcdf_monotone)),
        ("frm-objectives", "closed_form_consistency", Box::new(closed_form)),
        ("frm-objectives", "bias_only_reduces_to_mse", Box::new(bias_only)),
        ("frm-objectives", "metric_scaling_argmin_invariance", Box::new(argmin_invariance)),
        ("frm-objectives", "adaptation_norms_sum_to_quadratic_term", Box::new(adaptation_sum)),
        ("frm-objectives", "gumbel_softmax_frequencies", Box::new(gumbel)),
        ("frm-objectives", "classification_monotone_in_margin", Box::new(classification_monotone)),
        ("optimizer", "bit_reproducible_traces", Box::new(reproducible_training)),
        ("optimizer", "parameter_initialization", Box::new(initialization)),
        ("data-synth", "deterministic_generation", Box::new(synth_determinism)),
        ("data-synth", "train_test_exchangeable", Box::new(exchangeable)),
        ("data-synth", "variance_preserving_interpolation", Box::new(variance_preserving)),
        ("mountain-car", "deterministic_transitions", Box::new(mc_determinism)),
        ("mountain-car", "ground_truth_value_range", Box::new(value_range)),
        ("mountain-car", "state_bounds", Box::new(state_bounds)),
        ("mountain-car", "golden_steps_to_goal", Box::new(golden_steps)),
        ("experiment-cli", "end_to_end_determinism", Box::new(end_to_end_determinism)),
        ("experiment-cli", "ratio_is_mean_of_per_seed_ratios", Box::new(ratio_aggregation)),
        ("experiment-cli", "run_reproducible_from_echo", Box::new(echo_reproduces)),
    ];
    let lines = checks
        .into_iter()
        .map(|(module, name, f)| {
            let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckLine {
                module,
                name,
                passed,
                detail,
            }
        })
        .collect();
    Ok(CheckReport { lines })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn regression_data(seed: u64, n: usize, d_in: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = uniform_vec(&mut rng, n * d_in, 1.5);
    let targets = uniform_vec(&mut rng, n, 1.0);
    Dataset::new(d_in, 1, inputs, targets).expect("shapes are consistent")
}

fn binary_data(seed: u64, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = uniform_vec(&mut rng, 2 * n, 2.0);
    let targets = inputs
        .chunks(2)
        .map(|x| if x[0] - 0.5 * x[1] + rng.random_range(-0.7..0.7) > 0.0 { 1.0 } else { 0.0 })
        .collect();
    Dataset::new(2, 1, inputs, targets).expect("shapes are consistent")
}

fn tight_cg() -> CgConfig {
    CgConfig {
        max_iters: 500,
        residual_tol: 1e-13,
    }
}

fn exact_cfg(mode: WeightMode, logdet: bool) -> ObjectiveConfig {
    ObjectiveConfig {
        weight_mode: mode,
        refresh_every: 1,
        damping: Damping::Absolute(1e-2),
        include_logdet: logdet,
        cg: tight_cg(),
    }
}

/// Adds a fixed offset to the first gradient coordinate.
struct Corrupted<F>(F, bool);

impl<F: ScalarFn> ScalarFn for Corrupted<F> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn value(&self, at: &[f64]) -> Result<f64> {
        self.0.value(at)
    }

    fn gradient(&self, at: &[f64]) -> Result<ParamVector> {
        let mut g = self.0.gradient(at)?;
        if self.1 {
            g[0] += 1e-2 * (1.0 + g[0].abs());
        }
        Ok(g)
    }
}

/// FRM regression with weights frozen at a reference point.
struct FrozenWeights<'a> {
    model: &'a MlpModel,
    batch: &'a Dataset,
    weights: DetachedWeights,
}

impl ScalarFn for FrozenWeights<'_> {
    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn value(&self, at: &[f64]) -> Result<f64> {
        Ok(weight_form_value(self.model, at, self.batch, &self.weights, true)?.value)
    }

    fn gradient(&self, at: &[f64]) -> Result<ParamVector> {
        weight_form_gradient(self.model, at, self.batch, &self.weights)
    }
}

/// The TD-FRM objective over all transitions.
struct TdWhole<'a>(&'a TdFrm);

impl ScalarFn for TdWhole<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn value(&self, at: &[f64]) -> Result<f64> {
        self.0.objective(at)
    }

    fn gradient(&self, at: &[f64]) -> Result<ParamVector> {
        let idx: Vec<usize> = (0..self.0.design().len()).collect();
        let (_, mut g) = self.0.batch_value_and_grad(at, &idx)?;
        g.scale(idx.len() as f64);
        Ok(g)
    }
}

fn small_td() -> Result<(RbfLinearModel, Vec<crate::mountain_car::Transition>)> {
    let model = RbfLinearModel::new(build_rbf_grid(GridKind::Uniform), true);
    let transitions = collect_transitions(energy_policy, 300, StartDistribution::default(), 5)?;
    Ok((model, transitions))
}

fn gradient_checks(corrupt: bool) -> Outcome {
    let mlp = MlpModel::new(vec![1, 3, 1])?;
    let classifier = MlpModel::new(vec![2, 3, 1])?;
    let reg = regression_data(1, 6, 1);
    let cls = binary_data(2, 8);
    let affine_batch = regression_data(3, 7, 2);
    let (rbf, transitions) = small_td()?;
    let td = TdFrm::new(td_design(&rbf, &transitions, 0.99)?, 1e-3, false)?;
    let h = affine_gram(&affine_batch);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut all_pass = true;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let mut run = |name: &'static str, f: &dyn ScalarFn, at: &[f64]| {
                let r = check_gradient(f, at, 1e-4);
                all_pass &= r.passed;
                match worst.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, e)) => *e = e.max(r.max_rel_error),
                    None => worst.push((name, r.max_rel_error)),
                }
            };
            let theta = uniform_vec(&mut rng, mlp.num_params(), 1.0);
            let theta_c = uniform_vec(&mut rng, classifier.num_params(), 1.0);
            let theta_a = uniform_vec(&mut rng, 3, 1.0);
            let theta_td = uniform_vec(&mut rng, td.dim(), 0.5);
            let erm_mse = ErmLoss {
                loss: LossKind::Mse,
                model: &mlp,
                batch: &reg,
            };
            run("erm_mse", &Corrupted(Exact(erm_mse), corrupt), &theta);
            let erm_bce = ErmLoss {
                loss: LossKind::Bce,
                model: &classifier,
                batch: &cls,
            };
            run("erm_bce", &Corrupted(Exact(erm_bce), corrupt), &theta_c);
            run("frm_linear", &Corrupted(Exact(FrmLinear::new(&affine_batch, &h)?), corrupt), &theta_a);
            let frm = FrmRegression {
                model: &mlp,
                batch: &reg,
                metric_samples: &reg,
                loss: LossKind::Mse,
                cfg: exact_cfg(WeightMode::Implicit, true),
            };
            run("frm_regression", &Corrupted(frm, corrupt), &theta);
            let op = build_metric(&mlp, &theta, LossKind::Mse, &reg, Damping::Absolute(1e-2))?;
            let frozen = FrozenWeights {
                model: &mlp,
                batch: &reg,
                weights: DetachedWeights::compute(&mlp, &theta, &reg, &op, &tight_cg())?,
            };
            let shifted: Vec<f64> = theta.iter().map(|v| v + 0.05).collect();
            run("frm_regression_frozen", &Corrupted(frozen, corrupt), &shifted);
            let frm_cls = FrmClassification {
                model: &classifier,
                batch: &cls,
                metric_samples: &cls,
                cfg: exact_cfg(WeightMode::Implicit, false),
            };
            run("frm_classification", &Corrupted(frm_cls, corrupt), &theta_c);
            run("frm_td", &Corrupted(TdWhole(&td), corrupt), &theta_td);
        }
    }
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((all_pass, format!("max rel err over 30 points (tol 1e-4): {detail}")))
}

fn hvp_fixture() -> Result<(MlpModel, Dataset, Vec<f64>)> {
    let model = MlpModel::new(vec![2, 4, 1])?;
    let data = regression_data(7, 10, 2);
    let theta = model.init_params(&mut ChaCha8Rng::seed_from_u64(8));
    Ok((model, data, theta))
}

fn hvp_linearity() -> Outcome {
    let (model, data, theta) = hvp_fixture()?;
    let f = MeanSquaredError {
        model: &model,
        data: &data,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let u = uniform_vec(&mut rng, theta.len(), 1.0);
        let v = uniform_vec(&mut rng, theta.len(), 1.0);
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let lhs = hvp(&f, &theta, &mix)?;
        let (hu, hv) = (hvp(&f, &theta, &u)?, hvp(&f, &theta, &v)?);
        let scale = lhs.norm().max(1.0);
        for k in 0..theta.len() {
            worst = worst.max((lhs[k] - a * hu[k] - b * hv[k]).abs() / scale);
        }
    }
    Ok((worst <= 1e-10, format!("max relative deviation {worst:.1e} (tol 1e-10)")))
}

fn hvp_symmetry() -> Outcome {
    let (model, data, theta) = hvp_fixture()?;
    let f = MeanSquaredError {
        model: &model,
        data: &data,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let u = uniform_vec(&mut rng, theta.len(), 1.0);
        let v = uniform_vec(&mut rng, theta.len(), 1.0);
        let a = dot(&u, &hvp(&f, &theta, &v)?);
        let b = dot(&v, &hvp(&f, &theta, &u)?);
        worst = worst.max(rel(a, b));
    }
    Ok((worst <= 1e-10, format!("max relative asymmetry {worst:.1e} (tol 1e-10)")))
}

fn hvp_vs_dense() -> Outcome {
    let model = MlpModel::new(vec![2, 5, 1])?;
    let data = regression_data(11, 12, 2);
    let theta = model.init_params(&mut ChaCha8Rng::seed_from_u64(12));
    let f = MeanSquaredError {
        model: &model,
        data: &data,
    };
    let p = theta.len();
    // dense Hessian from central differences of the exact gradient
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for j in 0..p {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[j] += h;
        minus[j] -= h;
        let (gp, gm) = (scalar_gradient(&f, &plus)?, scalar_gradient(&f, &minus)?);
        let col = hvp(&f, &theta, &ParamVector::basis(p, j))?;
        for i in 0..p {
            worst = worst.max((col[i] - (gp[i] - gm[i]) / (2.0 * h)).abs());
        }
    }
    Ok((worst < 1e-6, format!("P = {p}, max abs err {worst:.1e} (tol 1e-6)")))
}

fn flatten_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mlp = MlpModel::new(vec![3, 4, 2])?;
    let v = uniform_vec(&mut rng, mlp.num_params(), 3.0);
    let structured = MlpParams::unflatten(&mlp, &v)?;
    let mlp_ok = structured.flatten() == v && MlpParams::unflatten(&mlp, &structured.flatten())? == structured;
    let a = uniform_vec(&mut rng, 4, 3.0);
    let affine = AffineParams::unflatten(&a)?;
    let affine_ok = affine.flatten() == a && AffineParams::unflatten(&affine.flatten())? == affine;
    let count_ok = mlp.num_params() == 3 * 4 + 4 + 4 * 2 + 2 && AffineModel::new(3).num_params() == 4;
    Ok((mlp_ok && affine_ok && count_ok, "mlp and affine exact".into()))
}

fn affine_jacobian() -> Outcome {
    let model = AffineModel::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = uniform_vec(&mut rng, 3, 2.0);
    let mut ok = true;
    for _ in 0..10 {
        let theta = uniform_vec(&mut rng, 4, 5.0);
        let j = output_jacobian(&model, &theta, &x)?;
        ok &= (0..3).all(|k| j[(0, k)] == x[k]) && j[(0, 3)] == 1.0;
    }
    Ok((ok, "J = [x, 1] at 10 random parameter vectors".into()))
}

fn rbf_order() -> Outcome {
    let mut ok = true;
    for kind in [GridKind::Uniform, GridKind::Focused] {
        let grid = build_rbf_grid(kind);
        let nodes = axis_nodes(kind);
        ok &= grid == build_rbf_grid(kind) && grid.len() == 225;
        for (k, c) in grid.centers.iter().enumerate() {
            ok &= c[0] == nodes[k / 15] && c[1] == nodes[k % 15];
        }
    }
    Ok((ok, "225 centers, row-major over (position, velocity), rebuilt identically".into()))
}

fn mlp_metric(damping: f64) -> Result<(MetricOperator, usize)> {
    let model = MlpModel::new(vec![2, 6, 1])?;
    let data = regression_data(15, 25, 2);
    let theta = model.init_params(&mut ChaCha8Rng::seed_from_u64(16));
    Ok((build_metric(&model, &theta, LossKind::Mse, &data, Damping::Absolute(damping))?, model.num_params()))
}

fn metric_symmetry() -> Outcome {
    let (op, p) = mlp_metric(1e-3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let u = uniform_vec(&mut rng, p, 1.0);
        let v = uniform_vec(&mut rng, p, 1.0);
        let gap = (dot(&u, &op.apply(&v)) - dot(&v, &op.apply(&u))).abs();
        worst = worst.max(gap / (ParamVector::from(&u[..]).norm() * ParamVector::from(&v[..]).norm()));
    }
    Ok((worst <= 1e-8, format!("max |u·Hv − v·Hu| / |u||v| = {worst:.1e} (tol 1e-8)")))
}

fn metric_psd() -> Outcome {
    let eps = 1e-3;
    let (op, p) = mlp_metric(eps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut worst = f64::INFINITY;
    for _ in 0..20 {
        let v = uniform_vec(&mut rng, p, 1.0);
        worst = worst.min(dot(&v, &op.apply(&v)) - eps * dot(&v, &v));
    }
    Ok((worst >= -1e-10, format!("min v·(H+εI)v − ε|v|² = {worst:.1e}")))
}

fn metric_scale() -> Outcome {
    let (op, p) = mlp_metric(1e-3)?;
    let c = 3.7;
    let scaled = op.scaled(c);
    let v = uniform_vec(&mut ChaCha8Rng::seed_from_u64(19), p, 1.0);
    let (a, b) = (op.apply(&v), scaled.apply(&v));
    let apply_err = a.iter().zip(b.iter()).map(|(x, y)| rel(c * x, *y)).fold(0.0, f64::max);
    let batch = regression_data(20, 20, 1);
    let h = affine_gram(&batch);
    let base = fit_frm_linear(&batch, &h)?.params.flatten();
    let moved = fit_frm_linear(&batch, &(h * c))?.params.flatten();
    let argmin_err = base.iter().zip(&moved).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok((
        apply_err <= 1e-12 && argmin_err <= 1e-8,
        format!("apply rel err {apply_err:.1e}, linear argmin shift {argmin_err:.1e} (tol 1e-8)"),
    ))
}

fn td_metric() -> Outcome {
    let (rbf, transitions) = small_td()?;
    let design = td_design(&rbf, &transitions[..200], 0.99)?;
    let features = LinearFeatureModel {
        num_features: design.input_dim(),
    };
    let zero = vec![0.0; design.input_dim()];
    let td = dense_metric(&build_metric(&features, &zero, LossKind::Td, &design, Damping::Absolute(0.0))?, DEFAULT_DENSE_CAP)?;
    let mse = dense_metric(&build_metric(&features, &zero, LossKind::Mse, &design, Damping::Absolute(0.0))?, DEFAULT_DENSE_CAP)?;
    let psi = DMatrix::from_row_slice(design.len(), design.input_dim(), design.inputs());
    let direct = psi.transpose() * &psi * (2.0 / design.len() as f64);
    let (e1, e2) = ((&td - &mse).amax(), (&td - &direct).amax());
    Ok((e1 <= 1e-10 && e2 <= 1e-10, format!("P = {}, |td − mse| {e1:.1e}, |td − 2ΨᵀΨ/n| {e2:.1e}", design.input_dim())))
}

fn cg_vs_dense() -> Outcome {
    let (op, p) = mlp_metric(1e-2)?;
    let cfg = CgConfig::default();
    let b = uniform_vec(&mut ChaCha8Rng::seed_from_u64(21), p, 1.0);
    let cg = cg_solve(&op, &b, &cfg)?;
    let dense = dense_metric(&op, DEFAULT_DENSE_CAP)?;
    let direct = dense
        .clone()
        .lu()
        .solve(&nalgebra::DVector::from_column_slice(&b))
        .ok_or_else(|| FrmError::Numerical("dense metric is singular".into()))?;
    let diff: Vec<f64> = cg.solution.iter().zip(direct.iter()).map(|(x, y)| x - y).collect();
    let gap = ParamVector::from(DenseOperator(dense).apply(&diff)).norm() / ParamVector::from(&b[..]).norm();
    Ok((
        cg.converged && gap <= cfg.residual_tol,
        format!("|A(x_cg − x_dense)| / |b| = {gap:.1e} (tol {:.0e})", cfg.residual_tol),
    ))
}

fn weight_scaling() -> Outcome {
    let model = AffineModel::new(2);
    let data = regression_data(22, 15, 2);
    let theta = [0.3, -0.1, 0.2];
    let op = build_metric(&model, &theta, LossKind::Mse, &data, Damping::Absolute(1e-3))?;
    let c = 4.5;
    let scaled = op.scaled(c);
    let mut worst: f64 = 0.0;
    for i in 0..data.len() {
        let w = weight_matrix(&model, &theta, data.input(i), &op, &tight_cg())?.weight[(0, 0)];
        let wc = weight_matrix(&model, &theta, data.input(i), &scaled, &tight_cg())?.weight[(0, 0)];
        worst = worst.max(((wc * c - w) / w).abs());
    }
    Ok((worst <= 1e-10, format!("max |c·W_c − W| / W = {worst:.1e} (tol 1e-10)")))
}

fn logcdf_complement() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in -5000..=5000 {
        let z = k as f64 * 1e-3;
        worst = worst.max((gaussian_logcdf(z).exp() + gaussian_logcdf(-z).exp() - 1.0).abs());
    }
    Ok((worst <= 1e-12, format!("max |Φ(z) + Φ(−z) − 1| = {worst:.1e} on |z| ≤ 5")))
}

fn logcdf_monotone() -> Outcome {
    let mut prev = f64::NEG_INFINITY;
    let mut violations = 0;
    for k in -40_000..=10_000 {
        let v = gaussian_logcdf(k as f64 * 1e-3);
        if !(v >= prev) {
            violations += 1;
        }
        prev = v;
    }
    Ok((violations == 0, format!("{violations} decreases over [−40, 10] at spacing 1e-3")))
}

fn closed_form() -> Outcome {
    let model = AffineModel::new(2);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let batch = regression_data(30 + seed, 9, 2);
        let theta = uniform_vec(&mut ChaCha8Rng::seed_from_u64(40 + seed), 3, 1.0);
        let op = build_metric(&model, &theta, LossKind::Mse, &batch, Damping::Absolute(0.0))?.scaled(0.5);
        let taylor = frm_regression_objective(&model, &theta, &batch, &op, &exact_cfg(WeightMode::Detached, false))?;
        let exact = frm_linear_objective(&batch, &theta[..2], theta[2], &affine_gram(&batch))?;
        worst = worst.max(rel(taylor.value, exact));
    }
    Ok((worst <= 1e-10, format!("max rel gap {worst:.1e} over 5 batches (tol 1e-10)")))
}

fn bias_only() -> Outcome {
    let batch = regression_data(50, 20, 1);
    // Jacobian restricted to the offset: a single constant feature
    let ones = Dataset::new(1, 1, vec![1.0; batch.len()], batch.targets().to_vec())?;
    let offset_only = LinearFeatureModel { num_features: 1 };
    let op = build_metric(&offset_only, &[0.0], LossKind::Mse, &ones, Damping::Absolute(0.0))?.scaled(0.5);
    let weights: Vec<f64> = (0..batch.len())
        .map(|i| Ok(weight_matrix(&offset_only, &[0.0], ones.input(i), &op, &tight_cg())?.weight[(0, 0)]))
        .collect::<Result<_>>()?;
    let spread = weights.iter().fold(0.0f64, |m, w| m.max((w - weights[0]).abs()));
    let frm = fit_weighted_linear(&batch, &weights)?.params.flatten();
    let erm = fit_erm_linear(&batch)?.params.flatten();
    let gap = frm.iter().zip(&erm).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((
        spread <= 1e-12 && gap <= 1e-8,
        format!("weight spread {spread:.1e}, |θ_frm − θ_erm| = {gap:.1e} (tol 1e-8)"),
    ))
}

fn argmin_invariance() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let batch = regression_data(60 + seed, 20, 2);
        let h = affine_gram(&batch);
        let base = fit_frm_linear(&batch, &h)?.params.flatten();
        for c in [0.1, 2.0, 50.0] {
            let moved = fit_frm_linear(&batch, &(&h * c))?.params.flatten();
            worst = worst.max(base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    Ok((worst <= 1e-8, format!("max minimizer shift {worst:.1e} (tol 1e-8)")))
}

fn adaptation_sum() -> Outcome {
    let model = MlpModel::new(vec![1, 3, 1])?;
    let batch = regression_data(70, 8, 1);
    let theta = model.init_params(&mut ChaCha8Rng::seed_from_u64(71));
    let op = build_metric(&model, &theta, LossKind::Mse, &batch, Damping::Absolute(1e-2))?;
    let mut sum = 0.0;
    for i in 0..batch.len() {
        sum += minimal_adaptation_norm(&model, &theta, batch.input(i), batch.target(i)[0], &op, &tight_cg())?.value;
    }
    let q = frm_regression_objective(&model, &theta, &batch, &op, &exact_cfg(WeightMode::Detached, false))?.quadratic;
    let gap = rel(sum, q);
    Ok((gap <= 1e-10, format!("Σ adaptation {sum:.6}, quadratic {q:.6}, rel gap {gap:.1e}")))
}

fn gumbel() -> Outcome {
    let logits = [1.2, -0.4, 0.0, 2.1];
    let n = 100_000;
    let freq = gumbel_softmax_check(&logits, n, 73)?;
    let p = softmax(&logits);
    let err = freq.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let tol = 3.0 / (n as f64).sqrt();
    Ok((err < tol, format!("L∞ error {err:.4} (tol {tol:.4}) at n = {n}")))
}

fn classification_monotone() -> Outcome {
    let model = AffineModel::new(1);
    let mut ok = true;
    for x in [-2.0, -0.3, 0.0, 0.8, 2.5] {
        let batch = Dataset::from_pairs(&[(x, 1.0)]);
        let op = build_metric(&model, &[0.0, 0.0], LossKind::Bce, &batch, Damping::Absolute(0.1))?;
        let cfg = exact_cfg(WeightMode::Detached, false);
        let mut prev = f64::INFINITY;
        for k in 0..30 {
            let v = frm_binary_classification_objective(&model, &[0.0, 0.25 * k as f64], &batch, &op, &cfg)?.value;
            ok &= v < prev;
            prev = v;
        }
    }
    Ok((ok, "strictly decreasing over a 30-point logit grid at 5 inputs".into()))
}

fn reproducible_training() -> Outcome {
    let model = MlpModel::new(vec![1, 4, 1])?;
    let data = regression_data(80, 64, 1);
    let cfg = TrainConfig {
        batch_size: 16,
        steps: 200,
        eval_every: 50,
        seed: 81,
        ..TrainConfig::default()
    };
    let init = model.init_params(&mut ChaCha8Rng::seed_from_u64(82));
    let run = || {
        let mut task = ErmTask {
            loss: LossKind::Mse,
            model: &model,
            data: &data,
        };
        train(&mut task, &init, &cfg, 0.03, |p| p.iter().sum())
    };
    let (a, b) = (run()?, run()?);
    Ok((a == b, format!("{} records, identical final parameters", a.records.len())))
}

fn initialization() -> Outcome {
    let affine = AffineModel::new(3).init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let rbf = RbfLinearModel::new(build_rbf_grid(GridKind::Uniform), true).init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let zeros_ok = affine.iter().chain(&rbf).all(|&v| v == 0.0);
    let mlp = MlpModel::new(vec![4, 9, 1])?;
    let a = mlp.init_params(&mut ChaCha8Rng::seed_from_u64(83));
    let b = mlp.init_params(&mut ChaCha8Rng::seed_from_u64(83));
    let (_, fan_in_1, fan_out_1) = mlp.layer_span(0);
    let first = fan_in_1 * fan_out_1 + fan_out_1;
    let bounded = a[..first].iter().all(|v| v.abs() <= 0.5) && a[first..].iter().all(|v| v.abs() <= 1.0 / 3.0);
    Ok((zeros_ok && a == b && bounded, "linear models zero; MLP seeded and within ±1/√fan_in".into()))
}

fn linear_spec(alpha: f64, n: usize, seed: u64) -> LinearFgmSpec {
    LinearFgmSpec {
        dim: 1,
        n_train: n,
        n_test: n,
        slope: vec![1.0],
        offset: 0.0,
        noise_alpha: alpha,
        noise_scale: 0.5,
        seed,
    }
}

fn synth_determinism() -> Outcome {
    let s = linear_spec(0.5, 100, 90);
    let linear_ok = gen_linear_fgm(&s)? == gen_linear_fgm(&s)?;
    let model = MlpModel::new(vec![1, 4, 1])?;
    let m = MlpFgmSpec {
        center: model.init_params(&mut ChaCha8Rng::seed_from_u64(91)),
        model,
        scales: PerturbationScales {
            hidden_weights: 0.3,
            ..PerturbationScales::default()
        },
        n_train: 50,
        n_test: 50,
        seed: 92,
    };
    let mlp_ok = gen_mlp_fgm(&m)? == gen_mlp_fgm(&m)?;
    Ok((linear_ok && mlp_ok, "linear and MLP generators repeat exactly".into()))
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn exchangeable() -> Outcome {
    let (a, b) = gen_linear_fgm(&linear_spec(0.5, 20_000, 93))?;
    let ((ma, va), (mb, vb)) = (mean_var(a.targets()), mean_var(b.targets()));
    let n = a.len() as f64;
    let z_mean = (ma - mb).abs() / ((va + vb) / n).sqrt();
    let z_var = (va - vb).abs() / (2.0 * (va * va + vb * vb) / n).sqrt();
    Ok((z_mean < 3.0 && z_var < 3.0, format!("mean gap {z_mean:.2} SE, variance gap {z_var:.2} SE")))
}

fn variance_preserving() -> Outcome {
    let n = 100_000;
    let mut worst: f64 = 0.0;
    for (k, alpha) in [0.0, 0.25, 0.5, 0.75, 1.0].into_iter().enumerate() {
        let spec = linear_spec(alpha, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(94 + k as u64);
        let resid: Vec<f64> = (0..n)
            .map(|_| {
                let (y, clean) = spec.draw_label(&[1.0], &mut rng);
                y - clean
            })
            .collect();
        worst = worst.max((mean_var(&resid).1 / 0.25 - 1.0).abs());
    }
    Ok((worst < 0.05, format!("max relative deviation from σ² at |x| = 1: {worst:.3} (tol 0.05)")))
}

fn mc_determinism() -> Outcome {
    let a = collect_transitions(energy_policy, 2000, StartDistribution::default(), 95)?;
    let b = collect_transitions(energy_policy, 2000, StartDistribution::default(), 95)?;
    let c = collect_transitions(energy_policy, 2000, StartDistribution::default(), 96)?;
    Ok((a == b && a != c, "same seed repeats, different seed differs".into()))
}

fn value_range() -> Outcome {
    let gamma = 0.99;
    let states = sample_visited_states(300, 97)?;
    let gt = ground_truth_values(&states, energy_policy, gamma, 1, 0)?;
    let floor = -1.0 / (1.0 - gamma);
    let ok = gt.values.iter().all(|&v| v <= 0.0 && v > floor);
    let min = gt.values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((ok, format!("300 states, min value {min:.2} > {floor}")))
}

fn state_bounds() -> Outcome {
    let mut ok = collect_transitions(energy_policy, 5000, StartDistribution::default(), 98)?
        .iter()
        .all(|t| t.s.in_bounds() && t.next.in_bounds());
    // random actions reach the left wall and the speed cap
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut s = McState::new(-0.5, 0.0);
    for _ in 0..20_000 {
        let a = [Action::Reverse, Action::Coast, Action::Forward][rng.random_range(0..3)];
        let (next, _, terminal) = step(s, a);
        ok &= next.in_bounds();
        s = if terminal { McState::new(-0.5, 0.0) } else { next };
    }
    Ok((ok, "energy-policy data and 20000 random-action steps stay in bounds".into()))
}

fn golden_steps() -> Outcome {
    let t = steps_to_goal(McState::new(-0.5, 0.0));
    Ok((t == Some(VALLEY_STEPS_TO_GOAL), format!("{t:?} steps from (−0.5, 0), pinned {VALLEY_STEPS_TO_GOAL}")))
}

fn tiny_linreg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(ExperimentKind::Linreg);
    cfg.seeds = vec![0, 1, 2, 3];
    cfg.linreg.alphas = vec![0.0, 1.0];
    cfg.linreg.dims = vec![1];
    cfg.linreg.n_test = 500;
    cfg
}

/// A scratch directory removed on drop.
struct Scratch(PathBuf);

impl Scratch {
    fn new(tag: &str) -> Result<Self> {
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        let dir = std::env::temp_dir().join(format!("frm-check-{}-{tag}-{nanos}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        Ok(Scratch(dir))
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn end_to_end_determinism() -> Outcome {
    let cfg = tiny_linreg();
    let (a, b) = (Scratch::new("a")?, Scratch::new("b")?);
    emit_report(&run_linreg(&cfg)?, &a.0)?;
    emit_report(&run_linreg(&cfg)?, &b.0)?;
    let same = std::fs::read(a.0.join("rows.csv"))? == std::fs::read(b.0.join("rows.csv"))?;
    Ok((same, "two runs of one config give byte-identical rows.csv".into()))
}

fn ratio_aggregation() -> Outcome {
    let dir = Scratch::new("ratio")?;
    emit_report(&run_linreg(&tiny_linreg())?, &dir.0)?;
    let Rows::Linreg(rows) = read_rows(ExperimentKind::Linreg, &dir.0.join("rows.csv"))? else {
        return Ok((false, "rows.csv has the wrong schema".into()));
    };
    let summary = read_summary(&dir.0.join("summary.csv"))?;
    let mut worst: f64 = 0.0;
    for alpha in [0.0, 1.0] {
        let condition = linreg_condition(alpha, 1);
        let mse = |seed: u64, m: Method| {
            rows.iter()
                .find(|r| r.seed == seed && r.alpha == alpha && r.dim == 1 && r.method == m)
                .map(|r| r.test_mse)
        };
        let ratios: Vec<f64> = (0..4).filter_map(|s| Some(mse(s, Method::Erm)? / mse(s, Method::Frm)?)).collect();
        let expected = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let reported = summary
            .iter()
            .find(|r| r.condition == condition && r.quantity == "ratio:erm/frm")
            .map(|r| r.mean)
            .ok_or_else(|| FrmError::Config(format!("summary lacks the ratio row for {condition}")))?;
        worst = worst.max(rel(expected, reported));
    }
    Ok((worst <= 1e-12, format!("recomputed from rows.csv, max rel gap {worst:.1e}")))
}

fn echo_reproduces() -> Outcome {
    let (first, second) = (Scratch::new("echo1")?, Scratch::new("echo2")?);
    emit_report(&run_linreg(&tiny_linreg())?, &first.0)?;
    let echo = std::fs::read_to_string(first.0.join("config.echo"))?;
    let cfg = ExperimentConfig::from_toml(&echo, None, &[])?;
    emit_report(&run_linreg(&cfg)?, &second.0)?;
    let same = std::fs::read(first.0.join("rows.csv"))? == std::fs::read(second.0.join("rows.csv"))?;
    Ok((same, "rerunning from config.echo alone reproduces rows.csv".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_config() -> ExperimentConfig {
        ExperimentConfig::defaults(ExperimentKind::Check)
    }

    #[test]
    fn every_check_has_a_distinct_name() {
        let report = run_check(&check_config()).unwrap();
        let mut names: Vec<_> = report.lines.iter().map(|l| (l.module, l.name)).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_gradient_fails_the_gradient_check() {
        let mut cfg = check_config();
        cfg.check.corrupt_gradient = true;
        let report = run_check(&cfg).unwrap();
        let failed: Vec<_> = report.failures().map(|l| l.name).collect();
        assert_eq!(failed, vec!["objective_gradients_match_finite_differences"]);
    }
}
