//! The three experiment families.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{FrmError, Result};
use crate::models::{build_rbf_grid, MlpModel, Model, RbfLinearModel};
use crate::mountain_car::{collect_transitions, energy_policy, ground_truth_values, sample_visited_states, McState};
use crate::objectives::{fit_erm_linear, fit_frm_linear, linear_frm_weights, affine_gram, td_design, LinearFit, TdFrm};
use crate::optim::{grid_search, train, ErmTask, FrmRegressionTask, GridResult, TrainConfig};
use crate::metric::{Damping, LossKind};
use crate::synth::{gen_linear_fgm, gen_mlp_fgm, LinearFgmSpec, MlpFgmSpec};

use super::config::{ExperimentConfig, ExperimentKind, Method};
use super::report::{
    features_condition, regime_condition, ExperimentReport, LinregRow, MountainCarRow, Rows, SynthMlpRow,
};

fn expect_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    cfg.validate()?;
    if cfg.experiment != kind {
        return Err(FrmError::Config(format!("config is for `{}`, not `{kind}`", cfg.experiment)));
    }
    Ok(())
}

/// Derives an independent stream seed from a run seed and a purpose tag.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mean squared error against the noiseless targets.
fn clean_mse<M: Model>(model: &M, params: &[f64], data: &Dataset) -> f64 {
    let mut total = 0.0;
    for i in 0..data.len() {
        let f = model.forward(params, data.input(i));
        let y = data.clean_target(i).unwrap_or(data.target(i));
        total += f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    total / data.len() as f64
}

fn frm_linear_fit(train: &Dataset, notes: &mut Vec<String>, tag: &str) -> Result<LinearFit> {
    let mut h = affine_gram(train);
    if linear_frm_weights(train, &h).is_err() {
        let p = h.nrows();
        let ridge = 1e-8 * h.trace() / p as f64;
        for k in 0..p {
            h[(k, k)] += ridge;
        }
        notes.push(format!("{tag}: singular input Gram matrix, damped by {ridge:e}"));
    }
    fit_frm_linear(train, &h)
}

/// Test MSE of ERM (normal equations) and FRM (exact minimizer of the
/// closed-form objective) across the noise sweep. Test error is measured
/// against the noiseless line `λ*·x + β*`.
pub fn run_linreg(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    expect_kind(cfg, ExperimentKind::Linreg)?;
    let l = &cfg.linreg;
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for &alpha in &l.alphas {
        for &dim in &l.dims {
            for &seed in &cfg.seeds {
                let spec = LinearFgmSpec {
                    dim,
                    n_train: l.n_train,
                    n_test: l.n_test,
                    slope: vec![l.slope; dim],
                    offset: l.offset,
                    noise_alpha: alpha,
                    noise_scale: l.noise_scale,
                    seed,
                };
                let (train_set, test_set) = gen_linear_fgm(&spec)?;
                let tag = format!("alpha={alpha} dim={dim} seed={seed}");
                for &method in &cfg.methods {
                    let fit = match method {
                        Method::Erm => fit_erm_linear(&train_set)?,
                        Method::Frm => frm_linear_fit(&train_set, &mut notes, &tag)?,
                    };
                    if fit.damped {
                        notes.push(format!("{tag} {}: singular normal equations, damped refit", method.as_str()));
                    }
                    let model = crate::models::AffineModel::new(dim);
                    rows.push(LinregRow {
                        seed,
                        alpha,
                        dim,
                        method,
                        test_mse: clean_mse(&model, &fit.params.flatten(), &test_set),
                    });
                }
            }
        }
    }
    Ok(ExperimentReport::new(
        ExperimentKind::Linreg,
        Rows::Linreg(rows),
        &cfg.to_toml()?,
        BTreeMap::new(),
        notes,
    ))
}

/// Feature rows and ground-truth values of a fixed state set.
struct ValueProbe {
    features: Vec<Vec<f64>>,
    truth: Vec<f64>,
}

impl ValueProbe {
    fn new(model: &RbfLinearModel, states: &[McState], gamma: f64) -> Result<Self> {
        let gt = ground_truth_values(states, energy_policy, gamma, 1, 0)?;
        Ok(ValueProbe {
            features: states.iter().map(|s| model.features(s.normalized())).collect(),
            truth: gt.values,
        })
    }

    fn rmse(&self, theta: &[f64]) -> f64 {
        let sq: f64 = self
            .features
            .iter()
            .zip(&self.truth)
            .map(|(f, v)| (crate::param::dot(f, theta) - v).powi(2))
            .sum();
        (sq / self.truth.len() as f64).sqrt()
    }
}

/// Absolute `ε` for the TD metric `(1/n)ΨᵀΨ`; its trace is exact here.
fn td_damping(design: &Dataset, damping: Damping) -> f64 {
    match damping {
        Damping::Absolute(eps) => eps,
        Damping::Relative(r) => {
            let trace = design.inputs().iter().map(|v| v * v).sum::<f64>() / design.len() as f64;
            r * trace / design.input_dim() as f64
        }
    }
}

fn search_td(objective: &mut TdFrm, cfg: &TrainConfig, eval: &ValueProbe, validation: &ValueProbe) -> Result<GridResult> {
    let init = vec![0.0; objective.dim()];
    grid_search(
        cfg,
        |step| train(objective, &init, cfg, step, |theta| eval.rmse(theta)),
        |trace| validation.rmse(&trace.final_params),
    )
}

/// TD value estimation on offline energy-policy data with ERM and TD-FRM,
/// for each RBF layout. Learning curves report RMSE against Monte-Carlo
/// values on held-out on-policy states; the step size is chosen on a
/// separate validation state set.
pub fn run_mountain_car(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    expect_kind(cfg, ExperimentKind::MountainCar)?;
    let m = &cfg.mountain_car;
    let eval_states = sample_visited_states(m.eval_states, m.eval_seed)?;
    let validation_states = sample_visited_states(m.validation_states, m.validation_seed)?;
    let mut rows = Vec::new();
    let mut excluded = BTreeMap::new();
    let mut notes = Vec::new();
    for &kind in &m.features {
        let model = RbfLinearModel::new(build_rbf_grid(kind), m.bias_feature);
        let eval = ValueProbe::new(&model, &eval_states, m.gamma)?;
        let validation = ValueProbe::new(&model, &validation_states, m.gamma)?;
        let condition = features_condition(kind);
        for &seed in &cfg.seeds {
            let transitions = collect_transitions(energy_policy, m.transitions, m.start, seed)?;
            let design = td_design(&model, &transitions, m.gamma)?;
            let train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            for &method in &cfg.methods {
                let mut objective = match method {
                    Method::Erm => TdFrm::unweighted(design.clone()),
                    Method::Frm => TdFrm::new(design.clone(), td_damping(&design, m.damping), m.normalize_weights)?,
                };
                match search_td(&mut objective, &train_cfg, &eval, &validation) {
                    Ok(g) => {
                        let best = &g.best().trace;
                        notes.push(format!(
                            "{condition} seed={seed} {}: step size {}",
                            method.as_str(),
                            g.best_step
                        ));
                        rows.extend(best.records.iter().map(|r| MountainCarRow {
                            seed,
                            features: kind,
                            method,
                            step: r.step,
                            rmse: r.eval_metric,
                        }));
                    }
                    Err(FrmError::AllDiverged(_)) => {
                        *excluded.entry((condition.clone(), method)).or_insert(0) += 1;
                        notes.push(format!("{condition} seed={seed} {}: every step size diverged", method.as_str()));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(ExperimentReport::new(
        ExperimentKind::MountainCar,
        Rows::MountainCar(rows),
        &cfg.to_toml()?,
        excluded,
        notes,
    ))
}

/// MLP regression on functional-generative data: ERM-MSE against detached
/// FRM regression, both trained by the same SGD and step-size search. Test
/// error is measured against the central function `f_{θ*}`.
pub fn run_synth_mlp(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    expect_kind(cfg, ExperimentKind::SynthMlp)?;
    let s = &cfg.synth_mlp;
    let model = MlpModel::new(s.widths.clone())?;
    let mut rows = Vec::new();
    let mut excluded = BTreeMap::new();
    let mut notes = Vec::new();
    for &regime in &s.regimes {
        let condition = regime_condition(regime);
        for &seed in &cfg.seeds {
            let mut center = model.init_params(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, 1)));
            center.iter_mut().for_each(|v| *v *= s.center_scale);
            let spec = MlpFgmSpec {
                model: model.clone(),
                center,
                scales: s.scales(regime),
                n_train: s.n_train,
                n_test: s.n_test,
                seed,
            };
            let (train_set, test_set) = gen_mlp_fgm(&spec)?;
            let (_, validation_set) = gen_mlp_fgm(&MlpFgmSpec {
                n_train: 1,
                n_test: s.n_validation,
                seed: sub_seed(seed, 2),
                ..spec.clone()
            })?;
            let init = model.init_params(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, 3)));
            let train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let validate = |t: &crate::optim::TrainTrace| clean_mse(&model, &t.final_params, &validation_set);
            for &method in &cfg.methods {
                let result = match method {
                    Method::Erm => grid_search(
                        &train_cfg,
                        |step| {
                            let mut task = ErmTask {
                                loss: LossKind::Mse,
                                model: &model,
                                data: &train_set,
                            };
                            train(&mut task, &init, &train_cfg, step, |_| 0.0)
                        },
                        validate,
                    ),
                    Method::Frm => grid_search(
                        &train_cfg,
                        |step| {
                            let mut task =
                                FrmRegressionTask::new(&model, &train_set, train_set.clone(), cfg.objective, s.normalize)?;
                            train(&mut task, &init, &train_cfg, step, |_| 0.0)
                        },
                        validate,
                    ),
                };
                match result {
                    Ok(g) => {
                        let best = &g.best().trace;
                        if best.cg_warning_count > 0 {
                            notes.push(format!(
                                "{condition} seed={seed} {}: {} CG solves hit the iteration cap",
                                method.as_str(),
                                best.cg_warning_count
                            ));
                        }
                        rows.push(SynthMlpRow {
                            seed,
                            regime,
                            method,
                            test_mse: clean_mse(&model, &best.final_params, &test_set),
                        });
                    }
                    Err(FrmError::AllDiverged(_)) => {
                        *excluded.entry((condition.clone(), method)).or_insert(0) += 1;
                        notes.push(format!("{condition} seed={seed} {}: every step size diverged", method.as_str()));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(ExperimentReport::new(
        ExperimentKind::SynthMlp,
        Rows::SynthMlp(rows),
        &cfg.to_toml()?,
        excluded,
        notes,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::config::Regime;

    #[test]
    fn noiseless_linreg_is_exact_for_both() {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::Linreg);
        cfg.seeds = vec![0, 1];
        cfg.linreg.noise_scale = 0.0;
        cfg.linreg.n_test = 500;
        let r = run_linreg(&cfg).unwrap();
        let Rows::Linreg(rows) = &r.rows else { panic!() };
        assert!(rows.iter().all(|r| r.test_mse < 1e-12));
        assert_eq!(rows.len(), 5 * 2 * 2 * 2);
    }

    #[test]
    fn erm_only_mountain_car_has_only_erm_rows() {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::MountainCar);
        cfg.seeds = vec![0];
        cfg.methods = vec![Method::Erm];
        cfg.mountain_car.features = vec![crate::models::GridKind::Uniform];
        cfg.mountain_car.transitions = 500;
        cfg.mountain_car.eval_states = 20;
        cfg.mountain_car.validation_states = 20;
        cfg.train.steps = 50;
        cfg.train.eval_every = 25;
        cfg.train.step_sizes = vec![1e-2];
        let r = run_mountain_car(&cfg).unwrap();
        let Rows::MountainCar(rows) = &r.rows else { panic!() };
        assert!(!rows.is_empty() && rows.iter().all(|r| r.method == Method::Erm));
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 25, 50]);
    }

    #[test]
    fn noiseless_mlp_is_fit_by_both() {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::SynthMlp);
        cfg.seeds = vec![0];
        cfg.synth_mlp.regimes = vec![Regime::Clean];
        cfg.synth_mlp.widths = vec![1, 2, 1];
        cfg.synth_mlp.center_scale = 1.0;
        cfg.synth_mlp.n_train = 50;
        cfg.synth_mlp.n_test = 200;
        cfg.synth_mlp.n_validation = 50;
        cfg.train.steps = 30000;
        cfg.train.batch_size = 50;
        cfg.train.step_sizes = vec![0.1];
        let r = run_synth_mlp(&cfg).unwrap();
        let Rows::SynthMlp(rows) = &r.rows else { panic!() };
        for row in rows {
            assert!(row.test_mse < 1e-4, "{row:?}");
        }
    }

    #[test]
    fn wrong_kind_is_a_config_error() {
        let cfg = ExperimentConfig::defaults(ExperimentKind::Linreg);
        assert!(matches!(run_synth_mlp(&cfg), Err(FrmError::Config(_))));
    }
}
