//! Experiment harness: configuration, the runners, reports and the
//! invariant self-check.

pub mod check;
pub mod config;
pub mod report;
mod runs;

pub use check::{run_check, CheckLine, CheckReport};
pub use config::{parse_seeds, ExperimentConfig, ExperimentKind, Method, Regime};
pub use report::{emit_report, read_rows, read_summary, ExperimentReport, Rows, SummaryRow};
pub use runs::{run_linreg, run_mountain_car, run_synth_mlp};

use crate::error::Result;

/// Runs the experiment named in `cfg`. The self-check has its own entry
/// point, [`run_check`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match cfg.experiment {
        ExperimentKind::Linreg => run_linreg(cfg),
        ExperimentKind::MountainCar => run_mountain_car(cfg),
        ExperimentKind::SynthMlp => run_synth_mlp(cfg),
        ExperimentKind::Check => Err(crate::error::FrmError::Config(
            "`check` produces a check report, not an experiment report".into(),
        )),
    }
}
