//! Property tests for the library invariants, over random inputs.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use frm_core::diff::{hvp, output_jacobian, MeanSquaredError};
use frm_core::experiment::report::summarize;
use frm_core::experiment::{Method, Rows};
use frm_core::experiment::report::{linreg_condition, LinregRow};
use frm_core::linalg::{cg_solve, gaussian_logcdf, weight_matrix, CgConfig, DenseOperator};
use frm_core::metric::{build_metric, dense_metric, Damping, LossKind};
use frm_core::models::{
    build_rbf_grid, AffineModel, AffineParams, GridKind, LinearFeatureModel, MlpModel, MlpParams, Model,
    RbfLinearModel,
};
use frm_core::mountain_car::{collect_transitions, energy_policy, step, Action, McState, StartDistribution};
use frm_core::objectives::{
    fit_frm_linear, frm_linear_objective, frm_regression_objective, minimal_adaptation_norm, affine_gram,
    td_design, ObjectiveConfig, WeightMode,
};
use frm_core::optim::{train, ErmTask, TrainConfig};
use frm_core::param::dot;
use frm_core::synth::{gen_linear_fgm, LinearFgmSpec};
use frm_core::Dataset;

fn vec_of(n: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, n)
}

fn batch(n: usize, d: usize) -> impl Strategy<Value = Dataset> {
    (vec_of(n * d, 2.0), vec_of(n, 2.0)).prop_map(move |(x, y)| Dataset::new(d, 1, x, y).unwrap())
}

fn tight() -> CgConfig {
    CgConfig {
        max_iters: 500,
        residual_tol: 1e-13,
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hvp_is_linear_and_symmetric(
        theta in vec_of(17, 1.0),
        u in vec_of(17, 1.0),
        v in vec_of(17, 1.0),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        data in batch(6, 2),
    ) {
        let model = MlpModel::new(vec![2, 4, 1]).unwrap();
        let f = MeanSquaredError { model: &model, data: &data };
        let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let (hm, hu, hv) = (hvp(&f, &theta, &mix).unwrap(), hvp(&f, &theta, &u).unwrap(), hvp(&f, &theta, &v).unwrap());
        let scale = hm.norm().max(1.0);
        for k in 0..17 {
            prop_assert!((hm[k] - a * hu[k] - b * hv[k]).abs() <= 1e-10 * scale);
        }
        prop_assert!(close(dot(&u, &hv), dot(&v, &hu), 1e-10));
    }

    #[test]
    fn flatten_round_trips(v in vec_of(23, 10.0), a in vec_of(5, 10.0)) {
        let model = MlpModel::new(vec![2, 5, 1]).unwrap();
        let p = MlpParams::unflatten(&model, &v[..model.num_params()]).unwrap();
        prop_assert_eq!(p.flatten(), v[..model.num_params()].to_vec());
        prop_assert_eq!(MlpParams::unflatten(&model, &p.flatten()).unwrap(), p);
        let q = AffineParams::unflatten(&a).unwrap();
        prop_assert_eq!(q.flatten(), a.clone());
        prop_assert_eq!(AffineParams::unflatten(&q.flatten()).unwrap(), q);
    }

    #[test]
    fn affine_jacobian_ignores_parameters(theta in vec_of(4, 100.0), x in vec_of(3, 5.0)) {
        let j = output_jacobian(&AffineModel::new(3), &theta, &x).unwrap();
        prop_assert_eq!(j.row(0).iter().copied().collect::<Vec<_>>(), vec![x[0], x[1], x[2], 1.0]);
    }

    #[test]
    fn metric_is_symmetric_psd_and_scale_covariant(
        theta in vec_of(13, 1.5),
        u in vec_of(13, 1.0),
        v in vec_of(13, 1.0),
        c in 0.01f64..100.0,
        data in batch(10, 2),
    ) {
        let model = MlpModel::new(vec![2, 3, 1]).unwrap();
        let eps = 1e-3;
        let op = build_metric(&model, &theta, LossKind::Mse, &data, Damping::Absolute(eps)).unwrap();
        let norms = dot(&u, &u).sqrt() * dot(&v, &v).sqrt();
        prop_assert!((dot(&u, &op.apply(&v)) - dot(&v, &op.apply(&u))).abs() <= 1e-8 * norms);
        prop_assert!(dot(&v, &op.apply(&v)) >= eps * dot(&v, &v) - 1e-10);
        let scaled = op.scaled(c).apply(&v);
        for (s, o) in scaled.iter().zip(op.apply(&v).iter()) {
            prop_assert!(close(*s, c * o, 1e-12));
        }
    }

    #[test]
    fn linear_argmin_ignores_metric_scale(data in batch(20, 2), c in 0.01f64..100.0) {
        let h = affine_gram(&data);
        let a = fit_frm_linear(&data, &h).unwrap().params.flatten();
        let b = fit_frm_linear(&data, &(&h * c)).unwrap().params.flatten();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn weight_scales_inversely_with_metric(data in batch(8, 2), theta in vec_of(3, 1.0), c in 0.1f64..10.0) {
        let model = AffineModel::new(2);
        let op = build_metric(&model, &theta, LossKind::Mse, &data, Damping::Absolute(1e-3)).unwrap();
        let scaled = op.scaled(c);
        for i in 0..data.len() {
            let w = weight_matrix(&model, &theta, data.input(i), &op, &tight()).unwrap().weight[(0, 0)];
            let wc = weight_matrix(&model, &theta, data.input(i), &scaled, &tight()).unwrap().weight[(0, 0)];
            prop_assert!(((c * wc - w) / w).abs() <= 1e-10);
        }
    }

    #[test]
    fn cg_matches_dense_solve(theta in vec_of(13, 1.0), rhs in vec_of(13, 1.0), data in batch(12, 2)) {
        let model = MlpModel::new(vec![2, 3, 1]).unwrap();
        let op = build_metric(&model, &theta, LossKind::Mse, &data, Damping::Absolute(1e-2)).unwrap();
        let cfg = CgConfig::default();
        let cg = cg_solve(&op, &rhs, &cfg).unwrap();
        let dense = dense_metric(&op, 64).unwrap();
        let direct = dense.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&rhs));
        let diff = DVector::from_iterator(13, cg.solution.iter().zip(direct.iter()).map(|(a, b)| a - b));
        let gap = (&dense * diff).norm() / DVector::from_column_slice(&rhs).norm();
        prop_assert!(cg.converged && gap <= cfg.residual_tol);
        let _ = DenseOperator(dense);
    }

    #[test]
    fn logcdf_complement_and_order(z in -5.0f64..5.0, dz in 1e-6f64..3.0) {
        prop_assert!((gaussian_logcdf(z).exp() + gaussian_logcdf(-z).exp() - 1.0).abs() <= 1e-12);
        prop_assert!(gaussian_logcdf(z - dz * 8.0) < gaussian_logcdf(z));
    }

    #[test]
    fn closed_form_matches_taylor_form(data in batch(7, 2), theta in vec_of(3, 2.0)) {
        let model = AffineModel::new(2);
        let op = build_metric(&model, &theta, LossKind::Mse, &data, Damping::Absolute(0.0)).unwrap().scaled(0.5);
        let cfg = ObjectiveConfig { cg: tight(), ..ObjectiveConfig::linear() };
        let taylor = frm_regression_objective(&model, &theta, &data, &op, &cfg).unwrap().value;
        let exact = frm_linear_objective(&data, &theta[..2], theta[2], &affine_gram(&data)).unwrap();
        prop_assert!(close(taylor, exact, 1e-10));
    }

    #[test]
    fn adaptation_norms_sum_to_quadratic_term(data in batch(6, 1), seed in 0u64..1000) {
        let model = MlpModel::new(vec![1, 3, 1]).unwrap();
        let theta = model.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        let op = build_metric(&model, &theta, LossKind::Mse, &data, Damping::Absolute(1e-2)).unwrap();
        let cfg = ObjectiveConfig { weight_mode: WeightMode::Detached, cg: tight(), ..ObjectiveConfig::linear() };
        let q = frm_regression_objective(&model, &theta, &data, &op, &cfg).unwrap().quadratic;
        let sum: f64 = (0..data.len())
            .map(|i| minimal_adaptation_norm(&model, &theta, data.input(i), data.target(i)[0], &op, &tight()).unwrap().value)
            .sum();
        prop_assert!(close(sum, q, 1e-10));
    }

    #[test]
    fn training_is_bit_reproducible(seed in 0u64..1000, step in 1e-3f64..0.1) {
        let model = MlpModel::new(vec![1, 3, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = model.init_params(&mut rng);
        let data = Dataset::new(1, 1, (0..40).map(|i| i as f64 / 20.0 - 1.0).collect(), (0..40).map(|i| (i as f64 / 7.0).sin()).collect()).unwrap();
        let cfg = TrainConfig { batch_size: 8, steps: 60, eval_every: 20, seed, ..TrainConfig::default() };
        let run = || {
            let mut task = ErmTask { loss: LossKind::Mse, model: &model, data: &data };
            train(&mut task, &init, &cfg, step, |p| p[0]).unwrap()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn linear_generation_is_deterministic(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let spec = LinearFgmSpec {
            dim: 2, n_train: 30, n_test: 30, slope: vec![1.0, -0.5], offset: 0.2,
            noise_alpha: alpha, noise_scale: 0.5, seed,
        };
        prop_assert_eq!(gen_linear_fgm(&spec).unwrap(), gen_linear_fgm(&spec).unwrap());
    }

    #[test]
    fn transitions_are_deterministic_and_in_bounds(seed in any::<u64>()) {
        let a = collect_transitions(energy_policy, 400, StartDistribution::default(), seed).unwrap();
        prop_assert_eq!(&a, &collect_transitions(energy_policy, 400, StartDistribution::default(), seed).unwrap());
        prop_assert!(a.iter().all(|t| t.s.in_bounds() && t.next.in_bounds()));
    }

    #[test]
    fn random_actions_respect_bounds(p in -1.2f64..0.5, v in -0.07f64..0.07, actions in prop::collection::vec(0usize..3, 200)) {
        let mut s = McState::new(p, v);
        for a in actions {
            let (next, r, _) = step(s, [Action::Reverse, Action::Coast, Action::Forward][a]);
            prop_assert!(next.in_bounds() && r == -1.0);
            s = next;
        }
    }

    #[test]
    fn td_metric_is_mse_over_differences(seed in 0u64..1000, gamma in 0.0f64..0.999) {
        let grid = build_rbf_grid(GridKind::Focused);
        let model = RbfLinearModel::new(grid, true);
        let transitions = collect_transitions(energy_policy, 120, StartDistribution::default(), seed).unwrap();
        let design = td_design(&model, &transitions, gamma).unwrap();
        let features = LinearFeatureModel { num_features: design.input_dim() };
        let zero = vec![0.0; design.input_dim()];
        let td = build_metric(&features, &zero, LossKind::Td, &design, Damping::Absolute(0.0)).unwrap();
        let psi = DMatrix::from_row_slice(design.len(), design.input_dim(), design.inputs());
        let direct = psi.transpose() * &psi * (2.0 / design.len() as f64);
        prop_assert!((dense_metric(&td, 512).unwrap() - direct).amax() <= 1e-10);
    }

    #[test]
    fn summary_ratio_is_mean_of_seed_ratios(values in prop::collection::vec((0.01f64..5.0, 0.01f64..5.0), 1..30)) {
        let mut rows = Vec::new();
        for (seed, (e, f)) in values.iter().enumerate() {
            for (method, mse) in [(Method::Erm, *e), (Method::Frm, *f)] {
                rows.push(LinregRow { seed: seed as u64, alpha: 0.5, dim: 1, method, test_mse: mse });
            }
        }
        let summary = summarize(&Rows::Linreg(rows), &BTreeMap::new());
        let expected = values.iter().map(|(e, f)| e / f).sum::<f64>() / values.len() as f64;
        let row = summary.iter().find(|r| r.condition == linreg_condition(0.5, 1) && r.quantity == "ratio:erm/frm").unwrap();
        prop_assert!(close(row.mean, expected, 1e-12));
    }
}
