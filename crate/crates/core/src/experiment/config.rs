//! Experiment configuration: a TOML file of dotted sections, merged over
//! per-experiment defaults, then patched with `key.path=value` overrides.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{FrmError, Result};
use crate::metric::Damping;
use crate::models::GridKind;
use crate::mountain_car::StartDistribution;
use crate::objectives::ObjectiveConfig;
use crate::optim::TrainConfig;
use crate::synth::PerturbationScales;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Linreg,
    MountainCar,
    SynthMlp,
    Check,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Linreg => "linreg",
            ExperimentKind::MountainCar => "mountain-car",
            ExperimentKind::SynthMlp => "synth-mlp",
            ExperimentKind::Check => "check",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = FrmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linreg" => Ok(ExperimentKind::Linreg),
            "mountain-car" => Ok(ExperimentKind::MountainCar),
            "synth-mlp" => Ok(ExperimentKind::SynthMlp),
            "check" => Ok(ExperimentKind::Check),
            other => Err(FrmError::Config(format!("unknown experiment `{other}`"))),
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Erm,
    Frm,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Frm => "frm",
        }
    }
}

/// Noise regime of the synthetic MLP experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Gaussian perturbations of the hidden-layer weights.
    Hidden,
    /// Gaussian perturbation of the output bias only (additive output noise).
    Bias,
    /// No perturbation.
    Clean,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Hidden => "hidden",
            Regime::Bias => "bias",
            Regime::Clean => "clean",
        }
    }
}

/// Parses `"3"`, `"0..100"` (half-open) or `"1,5,9"` and mixtures such as
/// `"0..3,10"`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || FrmError::Config(format!("cannot parse seed list `{s}`"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    Ok(out)
}

fn seeds_from_toml<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<u64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Seeds {
        List(Vec<u64>),
        Text(String),
    }
    match Seeds::deserialize(d)? {
        Seeds::List(v) => Ok(v),
        Seeds::Text(s) => parse_seeds(&s).map_err(serde::de::Error::custom),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinregConfig {
    /// Share of the noise power on the slope; the sweep stands in for the
    /// unspecified "noise distribution" axis.
    pub alphas: Vec<f64>,
    pub dims: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_scale: f64,
    /// Every coordinate of the true slope.
    pub slope: f64,
    pub offset: f64,
}

impl Default for LinregConfig {
    fn default() -> Self {
        LinregConfig {
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            dims: vec![1, 10],
            n_train: 200,
            n_test: 10_000,
            noise_scale: 0.5,
            slope: 1.0,
            offset: 0.0,
        }
    }
}

/// Step sizes searched for mountain-car TD training.
pub const MOUNTAIN_CAR_STEP_GRID: [f64; 5] = [1.0, 3.0, 10.0, 30.0, 100.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MountainCarConfig {
    pub features: Vec<GridKind>,
    pub transitions: usize,
    pub gamma: f64,
    /// Append a constant feature to the RBF grid.
    pub bias_feature: bool,
    /// `ε` added to the TD metric; `relative` scales `trace(H)/P`.
    pub damping: Damping,
    /// Rescale the FRM loss multipliers to mean 1.
    pub normalize_weights: bool,
    pub start: StartDistribution,
    pub eval_states: usize,
    pub eval_seed: u64,
    /// States used only to pick the step size.
    pub validation_states: usize,
    pub validation_seed: u64,
}

impl Default for MountainCarConfig {
    fn default() -> Self {
        MountainCarConfig {
            features: vec![GridKind::Uniform, GridKind::Focused],
            transitions: 20_000,
            gamma: 0.99,
            bias_feature: true,
            damping: Damping::Relative(1e-4),
            normalize_weights: true,
            start: StartDistribution::default(),
            eval_states: 500,
            eval_seed: 1_000_001,
            validation_states: 500,
            validation_seed: 1_000_002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthMlpConfig {
    pub widths: Vec<usize>,
    pub regimes: Vec<Regime>,
    /// Perturbation scale of hidden weights in the `hidden` regime.
    pub hidden_weight_scale: f64,
    /// Perturbation scale of the output bias in the `bias` regime.
    pub output_bias_scale: f64,
    /// Multiplier on the default initialization used to draw θ*.
    pub center_scale: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_validation: usize,
    /// Scale the FRM objective by the mean weight at each refresh.
    pub normalize: bool,
}

impl Default for SynthMlpConfig {
    fn default() -> Self {
        SynthMlpConfig {
            widths: vec![1, 4, 1],
            regimes: vec![Regime::Hidden, Regime::Bias],
            hidden_weight_scale: 0.5,
            output_bias_scale: 0.1,
            center_scale: 3.0,
            n_train: 200,
            n_test: 2000,
            n_validation: 500,
            normalize: true,
        }
    }
}

impl SynthMlpConfig {
    pub fn scales(&self, regime: Regime) -> PerturbationScales {
        match regime {
            Regime::Hidden => PerturbationScales {
                hidden_weights: self.hidden_weight_scale,
                ..Default::default()
            },
            Regime::Bias => PerturbationScales {
                output_bias: self.output_bias_scale,
                ..Default::default()
            },
            Regime::Clean => PerturbationScales::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    /// Negative control: perturb one gradient so its check must fail.
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(deserialize_with = "seeds_from_toml")]
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub objective: ObjectiveConfig,
    pub linreg: LinregConfig,
    pub mountain_car: MountainCarConfig,
    pub synth_mlp: SynthMlpConfig,
    pub check: CheckConfig,
}

impl ExperimentConfig {
    /// Defaults for one experiment family.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let mut cfg = ExperimentConfig {
            experiment: kind,
            seeds: (0..20).collect(),
            methods: vec![Method::Erm, Method::Frm],
            out_dir: None,
            train: TrainConfig::default(),
            objective: ObjectiveConfig::linear(),
            linreg: LinregConfig::default(),
            mountain_car: MountainCarConfig::default(),
            synth_mlp: SynthMlpConfig::default(),
            check: CheckConfig::default(),
        };
        match kind {
            ExperimentKind::Linreg => cfg.seeds = (0..100).collect(),
            ExperimentKind::MountainCar => {
                cfg.train.steps = 20_000;
                cfg.train.eval_every = 1000;
                // TD differences are O(1 − γ), so useful steps sit far above the regression grid
                cfg.train.step_sizes = MOUNTAIN_CAR_STEP_GRID.to_vec();
            }
            ExperimentKind::SynthMlp => {
                cfg.seeds = (0..30).collect();
                cfg.train.steps = 2000;
                cfg.train.eval_every = 500;
                cfg.objective = ObjectiveConfig {
                    refresh_every: 10,
                    damping: Damping::Relative(1e-3),
                    ..ObjectiveConfig::nonlinear()
                };
            }
            ExperimentKind::Check => cfg.seeds = vec![0],
        }
        cfg
    }

    /// Builds a config from TOML text and `key.path=value` overrides.
    ///
    /// `kind` wins over an `experiment` key in the text; it may be omitted
    /// when the text names the experiment.
    pub fn from_toml(text: &str, kind: Option<ExperimentKind>, overrides: &[String]) -> Result<Self> {
        let mut file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| FrmError::Config(e.to_string()))?;
        let named = match file.get("experiment") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| FrmError::Config("`experiment` must be a string".into()))?
                    .parse::<ExperimentKind>()?,
            ),
            None => None,
        };
        let kind = kind
            .or(named)
            .ok_or_else(|| FrmError::Config("no experiment named in the config or on the command line".into()))?;
        file.insert("experiment".into(), toml::Value::String(kind.as_str().into()));
        for o in overrides {
            apply_override(&mut file, o)?;
        }
        let mut merged = to_table(&ExperimentConfig::defaults(kind))?;
        merge(&mut merged, file);
        let cfg: ExperimentConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| FrmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Exact TOML rendering of the effective config; feeding it back
    /// through [`ExperimentConfig::from_toml`] reproduces `self`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FrmError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(FrmError::Config("seed list is empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(FrmError::Config("seeds must be distinct".into()));
        }
        // TOML integers are signed 64-bit; larger seeds could not be echoed
        if sorted.last().is_some_and(|&s| s > i64::MAX as u64) {
            return Err(FrmError::Config("seeds must not exceed 2^63 - 1".into()));
        }
        if self.methods.is_empty() {
            return Err(FrmError::Config("method set is empty".into()));
        }
        self.train.validate()?;
        self.objective
            .validate()
            .map_err(|e| FrmError::Config(format!("objective: {e}")))?;
        let l = &self.linreg;
        if l.alphas.is_empty() || l.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(FrmError::Config("linreg.alphas must be nonempty and within [0, 1]".into()));
        }
        if l.dims.is_empty() || l.dims.contains(&0) || l.n_train == 0 || l.n_test == 0 || !(l.noise_scale >= 0.0) {
            return Err(FrmError::Config("linreg sizes must be positive and noise_scale nonnegative".into()));
        }
        let m = &self.mountain_car;
        if m.features.is_empty() || m.transitions == 0 || m.eval_states == 0 || m.validation_states == 0 {
            return Err(FrmError::Config("mountain_car sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&m.gamma) || !damping_ok(m.damping) {
            return Err(FrmError::Config("mountain_car.gamma must lie in [0, 1) and damping be nonnegative".into()));
        }
        if m.start.lo > m.start.hi {
            return Err(FrmError::Config("mountain_car.start.lo exceeds start.hi".into()));
        }
        if [m.eval_seed, m.validation_seed].iter().any(|s| self.seeds.contains(s)) || m.eval_seed == m.validation_seed {
            return Err(FrmError::Config("evaluation and validation seeds must be disjoint from training seeds".into()));
        }
        let s = &self.synth_mlp;
        if s.widths.len() < 2 || s.widths.contains(&0) || s.widths[0] == 0 {
            return Err(FrmError::Config("synth_mlp.widths needs at least input and output widths".into()));
        }
        if s.regimes.is_empty() || s.n_train == 0 || s.n_test == 0 || s.n_validation == 0 {
            return Err(FrmError::Config("synth_mlp sizes and regimes must be nonempty".into()));
        }
        if !(s.hidden_weight_scale >= 0.0 && s.output_bias_scale >= 0.0 && s.center_scale > 0.0) {
            return Err(FrmError::Config("synth_mlp scales must be nonnegative".into()));
        }
        Ok(())
    }
}

fn damping_ok(d: Damping) -> bool {
    match d {
        Damping::Absolute(v) | Damping::Relative(v) => v >= 0.0 && v.is_finite(),
    }
}

fn to_table<T: Serialize>(v: &T) -> Result<toml::Table> {
    toml::Table::try_from(v).map_err(|e| FrmError::Config(e.to_string()))
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`: the value is parsed as a TOML value, falling back to a
/// bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| FrmError::Config(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(FrmError::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("nonempty path");
    let mut node = table;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| FrmError::Config(format!("override `{spec}`: `{k}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..3,10").unwrap(), vec![0, 1, 2, 10]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert!(parse_seeds("a..b").is_err());
    }

    #[test]
    fn file_then_overrides() {
        let text = "experiment = \"linreg\"\nseeds = \"0..5\"\n[linreg]\nn_train = 50\n";
        let cfg = ExperimentConfig::from_toml(
            text,
            None,
            &["linreg.noise_scale=0.25".into(), "train.momentum=0.5".into()],
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.linreg.n_train, 50);
        assert_eq!(cfg.linreg.noise_scale, 0.25);
        assert_eq!(cfg.train.momentum, 0.5);
        assert_eq!(cfg.linreg.n_test, 10_000);
    }

    #[test]
    fn echo_round_trips() {
        for kind in [ExperimentKind::Linreg, ExperimentKind::MountainCar, ExperimentKind::SynthMlp] {
            let cfg = ExperimentConfig::defaults(kind);
            let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), None, &[]).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml("seeds = []", Some(ExperimentKind::Linreg), &[]).is_err());
        assert!(ExperimentConfig::from_toml("seeds = [1, 1]", Some(ExperimentKind::Linreg), &[]).is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1", Some(ExperimentKind::Linreg), &[]).is_err());
        assert!(ExperimentConfig::from_toml("", None, &[]).is_err());
        assert!(ExperimentConfig::from_toml("", Some(ExperimentKind::Linreg), &["linreg.alphas=[2.0]".into()]).is_err());
    }

    #[test]
    fn string_override_falls_back() {
        let cfg =
            ExperimentConfig::from_toml("", Some(ExperimentKind::MountainCar), &["mountain_car.features=[\"focused\"]".into()])
                .unwrap();
        assert_eq!(cfg.mountain_car.features, vec![GridKind::Focused]);
    }
}
