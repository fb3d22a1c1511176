use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{contract, Result};
use crate::scalar::Scalar;

/// Fully connected network with tanh hidden layers and a linear output layer.
///
/// Parameters are flattened layer by layer; each layer stores its weight
/// matrix row-major (`out × in`) followed by its bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpModel {
    widths: Vec<usize>,
}

impl MlpModel {
    /// `widths = [d_in, hidden…, d_out]`.
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(contract(format!("invalid layer widths {widths:?}")));
        }
        Ok(MlpModel { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Offset of layer `l`'s weights inside the flat vector, and its shape.
    pub fn layer_span(&self, l: usize) -> (usize, usize, usize) {
        let offset = self.widths[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum::<usize>();
        (offset, self.widths[l], self.widths[l + 1])
    }

    fn activations<T: Scalar>(&self, params: &[T], x: &[f64]) -> Vec<Vec<T>> {
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.widths.len());
        acts.push(x.iter().map(|&v| T::from_f64(v)).collect());
        for l in 0..self.num_layers() {
            let (off, n_in, n_out) = self.layer_span(l);
            let weights = &params[off..off + n_in * n_out];
            let bias = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            let prev = &acts[l];
            let last = l + 1 == self.num_layers();
            let next: Vec<T> = (0..n_out)
                .map(|o| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    let mut z = bias[o];
                    for (w, a) in row.iter().zip(prev) {
                        z += *w * *a;
                    }
                    if last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(next);
        }
        acts
    }
}

impl Model for MlpModel {
    fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn input_dim(&self) -> usize {
        self.widths[0]
    }

    fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn forward<T: Scalar>(&self, params: &[T], x: &[f64]) -> Vec<T> {
        self.activations(params, x).pop().unwrap()
    }

    /// Uniform in `±1/√fan_in` per layer, biases included.
    fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in 0..self.num_layers() {
            let (_, fan_in, fan_out) = self.layer_span(l);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..(fan_in * fan_out + fan_out) {
                out.push(rng.random_range(-bound..bound));
            }
        }
        out
    }

    fn vjp<T: Scalar>(&self, params: &[T], x: &[f64], w: &[T]) -> Vec<T> {
        let acts = self.activations(params, x);
        let mut grad = vec![T::zero(); self.num_params()];
        // delta holds ∂(wᵀf)/∂z for the current layer's pre-activations
        let mut delta: Vec<T> = w.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (off, n_in, n_out) = self.layer_span(l);
            let prev = &acts[l];
            for o in 0..n_out {
                for i in 0..n_in {
                    grad[off + o * n_in + i] = delta[o] * prev[i];
                }
                grad[off + n_in * n_out + o] = delta[o];
            }
            if l > 0 {
                let weights = &params[off..off + n_in * n_out];
                delta = (0..n_in)
                    .map(|i| {
                        let mut s = T::zero();
                        for o in 0..n_out {
                            s += weights[o * n_in + i] * delta[o];
                        }
                        let a = prev[i];
                        s * (T::from_f64(1.0) - a * a)
                    })
                    .collect();
            }
        }
        grad
    }
}

/// Structured view of MLP parameters, one entry per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// Row-major `out × in` weight matrices.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn unflatten(model: &MlpModel, values: &[f64]) -> Result<Self> {
        if values.len() != model.num_params() {
            return Err(contract(format!(
                "expected {} MLP parameters, got {}",
                model.num_params(),
                values.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..model.num_layers() {
            let (off, n_in, n_out) = model.layer_span(l);
            weights.push(values[off..off + n_in * n_out].to_vec());
            biases.push(values[off + n_in * n_out..off + n_in * n_out + n_out].to_vec());
        }
        Ok(MlpParams { weights, biases })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::eval;

    #[test]
    fn parameter_count() {
        let m = MlpModel::new(vec![2, 4, 1]).unwrap();
        assert_eq!(m.num_params(), 2 * 4 + 4 + 4 + 1);
        let m = MlpModel::new(vec![1, 3, 1]).unwrap();
        assert_eq!(m.num_params(), 10);
    }

    #[test]
    fn hand_composed_tanh_network() {
        // 1-3-1: W1 = (0.5, -1, 2), b1 = (0.1, 0.2, -0.3), W2 = (1, -2, 0.5), b2 = 0.7
        let m = MlpModel::new(vec![1, 3, 1]).unwrap();
        let p = [0.5, -1.0, 2.0, 0.1, 0.2, -0.3, 1.0, -2.0, 0.5, 0.7];
        let expected = 1.0 * 0.1f64.tanh() - 2.0 * 0.2f64.tanh() + 0.5 * (-0.3f64).tanh() + 0.7;
        let y = eval(&m, &p, &[0.0]).unwrap();
        assert!((y[0] - expected).abs() < 1e-15);
        let x = 0.8;
        let expected = 1.0 * (0.5 * x + 0.1f64).tanh() - 2.0 * (-x + 0.2f64).tanh()
            + 0.5 * (2.0 * x - 0.3f64).tanh()
            + 0.7;
        assert!((eval(&m, &p, &[x]).unwrap()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_layers() {
        assert!(MlpModel::new(vec![3]).is_err());
        assert!(MlpModel::new(vec![3, 0, 1]).is_err());
    }
}
