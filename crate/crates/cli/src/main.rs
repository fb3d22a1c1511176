//! `frm <experiment> [--config <path>] [--out <dir>] [--seeds 0..20] [--override key=value]...`
//!
//! Exit status: 0 on success, 1 when a check fails or a run errors, 2 on a
//! configuration error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use frm_core::experiment::{emit_report, run_check, run_experiment, ExperimentConfig, ExperimentKind};
use frm_core::FrmError;

#[derive(Debug, Parser)]
#[command(name = "frm", about = "Functional risk minimization experiments")]
struct Cli {
    /// linreg, mountain-car, synth-mlp or check
    experiment: ExperimentKind,
    /// TOML config; omitted keys take the experiment's defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir` in the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed list such as `0..20` or `1,5,9`
    #[arg(long)]
    seeds: Option<String>,
    /// Dotted-path substitution, e.g. `train.steps=500`; repeatable
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the effective config and exit
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                FrmError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, FrmError> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| FrmError::Config(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seeds) = &cli.seeds {
        overrides.push(format!("seeds=\"{seeds}\""));
    }
    ExperimentConfig::from_toml(&text, Some(cli.experiment), &overrides)
}

fn run(cli: Cli) -> Result<ExitCode, FrmError> {
    let cfg = load_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(ExitCode::SUCCESS);
    }
    let started = Instant::now();
    if cfg.experiment == ExperimentKind::Check {
        let report = run_check(&cfg)?;
        println!("{report}");
        eprintln!("finished in {:.1}s", started.elapsed().as_secs_f64());
        return Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) });
    }
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.experiment.as_str()));
    eprintln!("running {} over {} seeds", cfg.experiment, cfg.seeds.len());
    let report = run_experiment(&cfg)?;
    for note in &report.notes {
        eprintln!("note: {note}");
    }
    let paths = emit_report(&report, &out_dir)?;
    for row in &report.summary {
        println!(
            "{:<24} {:<18} n={:<4} mean={:.6} [{:.6}, {:.6}]",
            row.condition, row.quantity, row.n, row.mean, row.p2_5, row.p97_5
        );
    }
    for p in paths {
        println!("wrote {}", p.display());
    }
    eprintln!("finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(ExitCode::SUCCESS)
}
