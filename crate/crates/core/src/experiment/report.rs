//! Report rows, summary statistics and atomic CSV output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{FrmError, Result};
use crate::models::GridKind;

use super::config::{ExperimentKind, Method, Regime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinregRow {
    pub seed: u64,
    pub alpha: f64,
    pub dim: usize,
    pub method: Method,
    pub test_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MountainCarRow {
    pub seed: u64,
    pub features: GridKind,
    pub method: Method,
    pub step: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMlpRow {
    pub seed: u64,
    pub regime: Regime,
    pub method: Method,
    pub test_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rows {
    Linreg(Vec<LinregRow>),
    MountainCar(Vec<MountainCarRow>),
    SynthMlp(Vec<SynthMlpRow>),
}

/// Aggregate over seeds for one condition and quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub condition: String,
    pub quantity: String,
    pub n: usize,
    /// Seeds dropped because their run diverged.
    pub excluded: usize,
    pub mean: f64,
    pub p2_5: f64,
    pub p97_5: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub rows: Rows,
    pub summary: Vec<SummaryRow>,
    /// Effective configuration as TOML, with a provenance comment header.
    pub config_echo: String,
    /// Runs excluded from aggregates, keyed by `(condition, method)`.
    pub excluded: BTreeMap<(String, Method), usize>,
    /// Free-form notes such as damped refits or CG warnings.
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn new(
        kind: ExperimentKind,
        rows: Rows,
        config_toml: &str,
        excluded: BTreeMap<(String, Method), usize>,
        notes: Vec<String>,
    ) -> Self {
        let summary = summarize(&rows, &excluded);
        ExperimentReport {
            kind,
            rows,
            summary,
            config_echo: provenance(kind, config_toml),
            excluded,
            notes,
        }
    }

    pub fn summary_for(&self, condition: &str, quantity: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.condition == condition && s.quantity == quantity)
    }
}

fn provenance(kind: ExperimentKind, config_toml: &str) -> String {
    let mut out = format!(
        "# {} {}\n# experiment: {}\n",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        kind
    );
    if kind == ExperimentKind::Linreg {
        out.push_str("# alpha: share of noise power on the slope; a stand-in axis for the noise distribution\n");
    }
    if kind == ExperimentKind::MountainCar {
        out.push_str("# evaluation states: on-policy visitation, seeds in mountain_car.eval_seed / validation_seed\n");
    }
    out.push_str(config_toml);
    out
}

/// Linear-interpolation percentile of sorted data, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn stat(condition: &str, quantity: &str, values: &[f64], excluded: usize) -> SummaryRow {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    SummaryRow {
        condition: condition.to_string(),
        quantity: quantity.to_string(),
        n: values.len(),
        excluded,
        mean: values.iter().sum::<f64>() / values.len().max(1) as f64,
        p2_5: percentile(&sorted, 0.025),
        p97_5: percentile(&sorted, 0.975),
    }
}

/// `condition → method → seed → value`.
type Grouped = BTreeMap<String, BTreeMap<Method, BTreeMap<u64, f64>>>;

fn summarize_grouped(
    groups: &Grouped,
    metric: &str,
    ratio: (Method, Method),
    excluded: &BTreeMap<(String, Method), usize>,
) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for (cond, by_method) in groups {
        let skipped = |m: Method| excluded.get(&(cond.clone(), m)).copied().unwrap_or(0);
        for (m, vals) in by_method {
            let v: Vec<f64> = vals.values().copied().collect();
            out.push(stat(cond, &format!("{metric}:{}", m.as_str()), &v, skipped(*m)));
        }
        let (num, den) = ratio;
        if let (Some(a), Some(b)) = (by_method.get(&num), by_method.get(&den)) {
            let paired: Vec<(f64, f64)> = a.iter().filter_map(|(s, x)| b.get(s).map(|y| (*x, *y))).collect();
            let ratios: Vec<f64> = paired.iter().map(|(x, y)| x / y).collect();
            let dropped = skipped(num).max(skipped(den));
            out.push(stat(cond, &format!("ratio:{}/{}", num.as_str(), den.as_str()), &ratios, dropped));
            let wins: Vec<f64> = paired
                .iter()
                .map(|(e, f)| {
                    let frm_better = if num == Method::Frm { e < f } else { f < e };
                    f64::from(u8::from(frm_better))
                })
                .collect();
            out.push(stat(cond, "frm_wins", &wins, dropped));
        }
    }
    out
}

/// Per-condition mean and central 95% interval over seeds. Ratios are
/// formed per seed and then aggregated.
pub fn summarize(rows: &Rows, excluded: &BTreeMap<(String, Method), usize>) -> Vec<SummaryRow> {
    let mut groups = Grouped::new();
    match rows {
        Rows::Linreg(rows) => {
            for r in rows {
                groups
                    .entry(linreg_condition(r.alpha, r.dim))
                    .or_default()
                    .entry(r.method)
                    .or_default()
                    .insert(r.seed, r.test_mse);
            }
            summarize_grouped(&groups, "test_mse", (Method::Erm, Method::Frm), excluded)
        }
        Rows::MountainCar(rows) => {
            // the last recorded step of each run is its final RMSE
            for r in rows {
                let slot = groups
                    .entry(features_condition(r.features))
                    .or_default()
                    .entry(r.method)
                    .or_default();
                let last = rows
                    .iter()
                    .filter(|o| o.seed == r.seed && o.features == r.features && o.method == r.method)
                    .map(|o| o.step)
                    .max();
                if Some(r.step) == last {
                    slot.insert(r.seed, r.rmse);
                }
            }
            summarize_grouped(&groups, "final_rmse", (Method::Frm, Method::Erm), excluded)
        }
        Rows::SynthMlp(rows) => {
            for r in rows {
                groups
                    .entry(regime_condition(r.regime))
                    .or_default()
                    .entry(r.method)
                    .or_default()
                    .insert(r.seed, r.test_mse);
            }
            summarize_grouped(&groups, "test_mse", (Method::Erm, Method::Frm), excluded)
        }
    }
}

pub fn linreg_condition(alpha: f64, dim: usize) -> String {
    format!("alpha={alpha};dim={dim}")
}

pub fn features_condition(kind: GridKind) -> String {
    format!("features={}", kind.as_str())
}

pub fn regime_condition(regime: Regime) -> String {
    format!("regime={}", regime.as_str())
}

fn csv_bytes<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for it in items {
        w.serialize(it)?;
    }
    w.into_inner().map_err(|e| FrmError::Io(e.to_string()))
}

fn rows_bytes(rows: &Rows) -> Result<Vec<u8>> {
    match rows {
        Rows::Linreg(r) => csv_bytes(r),
        Rows::MountainCar(r) => csv_bytes(r),
        Rows::SynthMlp(r) => csv_bytes(r),
    }
}

/// Header-only CSV when there are no rows, so every report has a schema.
fn with_header(bytes: Vec<u8>, kind: ExperimentKind) -> Vec<u8> {
    if !bytes.is_empty() {
        return bytes;
    }
    let header = match kind {
        ExperimentKind::Linreg => "seed,alpha,dim,method,test_mse\n",
        ExperimentKind::MountainCar => "seed,features,method,step,rmse\n",
        ExperimentKind::SynthMlp => "seed,regime,method,test_mse\n",
        ExperimentKind::Check => "check,passed,detail\n",
    };
    header.as_bytes().to_vec()
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(FrmError::from)).collect()
}

/// Parses a `rows.csv` written by [`emit_report`].
pub fn read_rows(kind: ExperimentKind, path: &Path) -> Result<Rows> {
    Ok(match kind {
        ExperimentKind::Linreg => Rows::Linreg(read_csv(path)?),
        ExperimentKind::MountainCar => Rows::MountainCar(read_csv(path)?),
        ExperimentKind::SynthMlp => Rows::SynthMlp(read_csv(path)?),
        ExperimentKind::Check => return Err(FrmError::Config("check runs have no metric rows".into())),
    })
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    read_csv(path)
}

/// Writes `rows.csv`, `config.echo` and `summary.csv` into `out_dir`.
/// Every file is staged under a temporary name first and renamed only once
/// all of them were written, so a failure never leaves a partial summary.
pub fn emit_report(report: &ExperimentReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let files: [(&str, Vec<u8>); 3] = [
        ("rows.csv", with_header(rows_bytes(&report.rows)?, report.kind)),
        ("config.echo", report.config_echo.clone().into_bytes()),
        ("summary.csv", csv_bytes(&report.summary)?),
    ];
    let mut staged = Vec::new();
    for (name, bytes) in &files {
        let tmp = out_dir.join(format!(".{name}.tmp"));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        staged.push((tmp, out_dir.join(name)));
    }
    let mut out = Vec::new();
    for (tmp, dst) in staged {
        fs::rename(&tmp, &dst)?;
        out.push(dst);
    }
    Ok(out)
}
