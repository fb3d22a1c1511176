//! Synthetic data from functional generative models: every point gets its
//! own parameter draw around a central value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FrmError, Result};
use crate::models::{MlpModel, Model};

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;

fn stream(seed: u64, which: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which);
    rng
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Linear model with a mixture of offset and slope noise.
///
/// Per point, `β_i = β* + √(1−α)·σ·ε` and `λ_i = λ* + √α·σ·η` with `η`
/// i.i.d. per coordinate, then `y = λ_i·x + β_i` for `x ~ U[−1, 1]^d`.
/// `α = 0` is pure output noise; `α = 1` is pure slope noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFgmSpec {
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub slope: Vec<f64>,
    pub offset: f64,
    pub noise_alpha: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl LinearFgmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_train == 0 || self.n_test == 0 {
            return Err(FrmError::Config("dim, n_train and n_test must be at least 1".into()));
        }
        if self.slope.len() != self.dim {
            return Err(FrmError::Config(format!("slope has {} entries for dim {}", self.slope.len(), self.dim)));
        }
        if !(0.0..=1.0).contains(&self.noise_alpha) {
            return Err(FrmError::Config(format!("noise_alpha must lie in [0, 1], got {}", self.noise_alpha)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(FrmError::Config("noise_scale must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Noisy label at `x` and the noiseless mean `λ*·x + β*`.
    pub(crate) fn draw_label<R: Rng>(&self, x: &[f64], rng: &mut R) -> (f64, f64) {
        let bias_sd = (1.0 - self.noise_alpha).sqrt() * self.noise_scale;
        let slope_sd = self.noise_alpha.sqrt() * self.noise_scale;
        let offset = self.offset + bias_sd * normal(rng);
        let mut y = offset;
        let mut clean = self.offset;
        for (l, xi) in self.slope.iter().zip(x) {
            y += (l + slope_sd * normal(rng)) * xi;
            clean += l * xi;
        }
        (y, clean)
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(n * self.dim);
        let mut targets = Vec::with_capacity(n);
        let mut clean = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let (y, c) = self.draw_label(&x, rng);
            inputs.extend(x);
            targets.push(y);
            clean.push(c);
        }
        Dataset::new(self.dim, 1, inputs, targets)?.with_clean_targets(clean)
    }
}

/// `(train, test)` from disjoint streams of the same seed.
pub fn gen_linear_fgm(spec: &LinearFgmSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let train = spec.sample(spec.n_train, &mut stream(spec.seed, TRAIN_STREAM))?;
    let test = spec.sample(spec.n_test, &mut stream(spec.seed, TEST_STREAM))?;
    Ok((train, test))
}

/// Gaussian perturbation scale for each parameter group of an MLP. Hidden
/// means every layer before the output layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationScales {
    pub hidden_weights: f64,
    pub hidden_biases: f64,
    pub output_weights: f64,
    pub output_bias: f64,
}

impl PerturbationScales {
    fn all(&self) -> [f64; 4] {
        [self.hidden_weights, self.hidden_biases, self.output_weights, self.output_bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpFgmSpec {
    pub model: MlpModel,
    /// Central parameters θ*.
    pub center: Vec<f64>,
    pub scales: PerturbationScales,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl MlpFgmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.center.len() != self.model.num_params() {
            return Err(FrmError::Config("center does not match the architecture".into()));
        }
        if self.scales.all().iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(FrmError::Config("perturbation scales must be finite and nonnegative".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(FrmError::Config("n_train and n_test must be at least 1".into()));
        }
        Ok(())
    }

    /// Standard deviation of each parameter's perturbation.
    pub fn parameter_scales(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.model.num_params()];
        let last = self.model.num_layers() - 1;
        for l in 0..=last {
            let (w_start, n_in, n_out) = self.model.layer_span(l);
            let b_start = w_start + n_in * n_out;
            let end = b_start + n_out;
            let (ws, bs) = if l == last {
                (self.scales.output_weights, self.scales.output_bias)
            } else {
                (self.scales.hidden_weights, self.scales.hidden_biases)
            };
            out[w_start..b_start].fill(ws);
            out[b_start..end].fill(bs);
        }
        out
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let d_in = self.model.input_dim();
        let d_out = self.model.output_dim();
        let sd = self.parameter_scales();
        let mut inputs = Vec::with_capacity(n * d_in);
        let mut targets = Vec::with_capacity(n * d_out);
        let mut clean = Vec::with_capacity(n * d_out);
        let mut theta = self.center.clone();
        for _ in 0..n {
            let x: Vec<f64> = (0..d_in).map(|_| rng.random_range(-1.0..=1.0)).collect();
            for ((t, c), s) in theta.iter_mut().zip(&self.center).zip(&sd) {
                *t = if *s > 0.0 { c + s * normal(rng) } else { *c };
            }
            targets.extend(self.model.forward(&theta, &x));
            clean.extend(self.model.forward(&self.center, &x));
            inputs.extend(x);
        }
        Dataset::new(d_in, d_out, inputs, targets)?.with_clean_targets(clean)
    }
}

/// `(train, test)` with `y_i = f_{θ_i}(x_i)`, `θ_i = θ* + δ_i`.
pub fn gen_mlp_fgm(spec: &MlpFgmSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let train = spec.sample(spec.n_train, &mut stream(spec.seed, TRAIN_STREAM))?;
    let test = spec.sample(spec.n_test, &mut stream(spec.seed, TEST_STREAM))?;
    Ok((train, test))
}
