//! Empirical check of the Gumbel-max identity: `argmax(l_c + G_c)` with
//! i.i.d. standard Gumbel noise is distributed as `softmax(l)`.

use rand::distr::{Distribution, Open01};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Frequencies of the perturbed argmax over `n_samples` draws.
pub fn gumbel_softmax_check(logits: &[f64], n_samples: usize, seed: u64) -> Result<Vec<f64>> {
    if logits.is_empty() || n_samples == 0 {
        return Err(contract("need at least one logit and one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; logits.len()];
    for _ in 0..n_samples {
        let mut best = (f64::NEG_INFINITY, 0);
        for (c, l) in logits.iter().enumerate() {
            let u: f64 = Open01.sample(&mut rng);
            let v = l - (-u.ln()).ln();
            if v > best.0 {
                best = (v, c);
            }
        }
        counts[best.1] += 1;
    }
    Ok(counts.iter().map(|&k| k as f64 / n_samples as f64).collect())
}
