//! Deterministic mini-batch SGD with heavy-ball momentum, plus step-size
//! grid search.

mod tasks;

pub use tasks::{ErmTask, FrmRegressionTask};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, FrmError, Result};
use crate::objectives::TdFrm;
use crate::param::ParamVector;

pub const DEFAULT_STEP_GRID: [f64; 5] = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    /// Candidate step sizes; a single entry means no search.
    pub step_sizes: Vec<f64>,
    pub momentum: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            steps: 1000,
            step_sizes: DEFAULT_STEP_GRID.to_vec(),
            momentum: 0.9,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 || self.eval_every == 0 {
            return Err(FrmError::Config("batch_size, steps and eval_every must be at least 1".into()));
        }
        if self.step_sizes.is_empty() || self.step_sizes.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(FrmError::Config("step-size grid must be nonempty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FrmError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// A training objective evaluated on index batches of a fixed dataset.
pub trait Trainable {
    fn dim(&self) -> usize;
    fn num_points(&self) -> usize;
    /// Called before each step; detached-weight objectives refresh here.
    fn refresh(&mut self, _step: usize, _params: &[f64]) -> Result<()> {
        Ok(())
    }
    /// Mean objective over the batch and its gradient.
    fn batch_value_and_grad(&mut self, params: &[f64], idx: &[usize]) -> Result<(f64, ParamVector)>;
    fn cg_warnings(&self) -> usize {
        0
    }
}

impl Trainable for TdFrm {
    fn dim(&self) -> usize {
        TdFrm::dim(self)
    }

    fn num_points(&self) -> usize {
        self.design().len()
    }

    fn batch_value_and_grad(&mut self, params: &[f64], idx: &[usize]) -> Result<(f64, ParamVector)> {
        TdFrm::batch_value_and_grad(self, params, idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    /// Batch objective at this step.
    pub train_objective: f64,
    pub eval_metric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    /// A non-finite objective, gradient or iterate appeared at this step.
    Diverged { step: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub step_size: f64,
    pub records: Vec<EvalRecord>,
    /// Last finite iterate.
    pub final_params: ParamVector,
    pub cg_warning_count: usize,
    pub status: TrainStatus,
}

impl TrainTrace {
    pub fn diverged(&self) -> bool {
        matches!(self.status, TrainStatus::Diverged { .. })
    }
}

/// Endless stream of shuffled index batches: each epoch is a fresh
/// permutation, and a short dataset yields its whole permutation.
struct BatchStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchStream {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = BatchStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// Runs `cfg.steps` momentum steps with one step size. `eval` is called on
/// the current iterate at step 0, every `eval_every` steps, and at the end.
pub fn train<T: Trainable + ?Sized, E: FnMut(&[f64]) -> f64>(
    objective: &mut T,
    init: &[f64],
    cfg: &TrainConfig,
    step_size: f64,
    mut eval: E,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let n = objective.num_points();
    if n == 0 {
        return Err(contract("no training data"));
    }
    if init.len() != objective.dim() {
        return Err(contract("initial parameters do not match the objective"));
    }
    let mut params = ParamVector::from(init);
    let mut velocity = ParamVector::zeros(params.len());
    let mut batches = BatchStream::new(n, cfg.batch_size, cfg.seed);
    let mut records = Vec::new();
    let mut status = TrainStatus::Completed;

    for step in 0..cfg.steps {
        objective.refresh(step, &params)?;
        let idx = batches.next_batch();
        let (value, grad) = objective.batch_value_and_grad(&params, &idx)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            status = TrainStatus::Diverged { step };
            break;
        }
        if step % cfg.eval_every == 0 {
            records.push(EvalRecord {
                step,
                train_objective: value,
                eval_metric: eval(&params),
            });
        }
        velocity.scale(cfg.momentum);
        velocity.axpy(1.0, &grad);
        let mut next = params.clone();
        next.axpy(-step_size, &velocity);
        if next.iter().any(|v| !v.is_finite()) {
            status = TrainStatus::Diverged { step };
            break;
        }
        params = next;
    }
    if status == TrainStatus::Completed {
        objective.refresh(cfg.steps, &params)?;
        let idx = batches.next_batch();
        let (value, _) = objective.batch_value_and_grad(&params, &idx)?;
        if value.is_finite() {
            records.push(EvalRecord {
                step: cfg.steps,
                train_objective: value,
                eval_metric: eval(&params),
            });
        } else {
            status = TrainStatus::Diverged { step: cfg.steps };
        }
    }
    Ok(TrainTrace {
        step_size,
        records,
        final_params: params,
        cg_warning_count: objective.cg_warnings(),
        status,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRun {
    pub trace: TrainTrace,
    /// `None` for diverged runs.
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best_step: f64,
    pub best_index: usize,
    pub runs: Vec<GridRun>,
}

impl GridResult {
    pub fn best(&self) -> &GridRun {
        &self.runs[self.best_index]
    }
}

/// One run per step size in `cfg.step_sizes` (all with `cfg.seed`); the run
/// with the smallest finite validation metric wins, ties going to the
/// smaller step. A run that diverged, or whose validation metric is not
/// finite, cannot win.
pub fn grid_search<F, V>(cfg: &TrainConfig, mut run: F, mut validation: V) -> Result<GridResult>
where
    F: FnMut(f64) -> Result<TrainTrace>,
    V: FnMut(&TrainTrace) -> f64,
{
    cfg.validate()?;
    let mut order: Vec<usize> = (0..cfg.step_sizes.len()).collect();
    order.sort_by(|&a, &b| cfg.step_sizes[a].total_cmp(&cfg.step_sizes[b]));
    let mut runs: Vec<Option<GridRun>> = vec![None; cfg.step_sizes.len()];
    let mut best: Option<(usize, f64)> = None;
    for &k in &order {
        let trace = run(cfg.step_sizes[k])?;
        let score = (!trace.diverged()).then(|| validation(&trace)).filter(|v| v.is_finite());
        if let Some(v) = score {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((k, v));
            }
        }
        runs[k] = Some(GridRun { trace, validation: score });
    }
    let (best_index, _) = best.ok_or_else(|| FrmError::AllDiverged(cfg.step_sizes.clone()))?;
    Ok(GridResult {
        best_step: cfg.step_sizes[best_index],
        best_index,
        runs: runs.into_iter().map(|r| r.expect("every grid point ran")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `Σ_i a_i (θ − c_i)²/n` in one dimension.
    struct Quadratic {
        curv: f64,
        center: f64,
        points: usize,
    }

    impl Trainable for Quadratic {
        fn dim(&self) -> usize {
            1
        }
        fn num_points(&self) -> usize {
            self.points
        }
        fn batch_value_and_grad(&mut self, p: &[f64], _idx: &[usize]) -> Result<(f64, ParamVector)> {
            let d = p[0] - self.center;
            Ok((self.curv * d * d, ParamVector::new(vec![2.0 * self.curv * d])))
        }
    }

    fn cfg(steps: usize, momentum: f64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            steps,
            step_sizes: vec![0.1],
            momentum,
            seed: 1,
            eval_every: 1,
        }
    }

    #[test]
    fn exact_step_converges_immediately() {
        let mut q = Quadratic {
            curv: 2.0,
            center: 3.0,
            points: 4,
        };
        // f'' = 4, so the exact step is 1/4
        let t = train(&mut q, &[-5.0], &cfg(2, 0.0), 0.25, |_| 0.0).unwrap();
        assert!((t.final_params[0] - 3.0).abs() < 1e-15);
        assert_eq!(t.status, TrainStatus::Completed);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut q = Quadratic {
            curv: 0.0,
            center: 0.0,
            points: 3,
        };
        let t = train(&mut q, &[1.5], &cfg(10, 0.9), 0.1, |_| 0.0).unwrap();
        assert_eq!(t.final_params[0], 1.5);
    }

    #[test]
    fn divergence_is_reported_with_finite_params() {
        let mut q = Quadratic {
            curv: 1.0,
            center: 0.0,
            points: 2,
        };
        let t = train(&mut q, &[1.0], &cfg(5000, 0.0), 10.0, |_| 0.0).unwrap();
        assert!(t.diverged());
        assert!(t.final_params[0].is_finite());
    }

    #[test]
    fn records_are_ordered() {
        let mut q = Quadratic {
            curv: 1.0,
            center: 0.0,
            points: 2,
        };
        let mut c = cfg(10, 0.5);
        c.eval_every = 3;
        let t = train(&mut q, &[1.0], &c, 0.1, |p| p[0]).unwrap();
        let steps: Vec<usize> = t.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 3, 6, 9, 10]);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut s = BatchStream::new(10, 5, 3);
        let mut seen: Vec<usize> = s.next_batch().into_iter().chain(s.next_batch()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn grid_prefers_convergent_and_smaller_ties() {
        let c = TrainConfig {
            step_sizes: vec![10.0, 0.1],
            ..cfg(200, 0.0)
        };
        let g = grid_search(
            &c,
            |s| {
                let mut q = Quadratic {
                    curv: 1.0,
                    center: 0.0,
                    points: 2,
                };
                train(&mut q, &[1.0], &c, s, |_| 0.0)
            },
            |t| t.final_params[0].abs(),
        )
        .unwrap();
        assert_eq!(g.best_step, 0.1);

        let c = TrainConfig {
            step_sizes: vec![0.3, 0.2],
            ..cfg(1, 0.0)
        };
        let g = grid_search(
            &c,
            |s| Ok(train(&mut Quadratic { curv: 0.0, center: 0.0, points: 1 }, &[0.0], &c, s, |_| 0.0)?),
            |_| 1.0,
        )
        .unwrap();
        assert_eq!(g.best_step, 0.2);
    }

    #[test]
    fn all_diverged_is_an_error() {
        let c = TrainConfig {
            step_sizes: vec![10.0],
            ..cfg(5000, 0.0)
        };
        let r = grid_search(
            &c,
            |s| train(&mut Quadratic { curv: 1.0, center: 0.0, points: 1 }, &[1.0], &c, s, |_| 0.0),
            |_| 0.0,
        );
        assert!(matches!(r, Err(FrmError::AllDiverged(g)) if g == vec![10.0]));
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { step_sizes: vec![], ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
