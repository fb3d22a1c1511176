use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{contract, FrmError, Result};

/// Paired inputs (`n × d_in`) and targets (`n × d_out`), stored row-major.
///
/// Synthetic generators also record the noise-free targets `f_{θ*}(x)`,
/// which the experiments use to measure excess test error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    input_dim: usize,
    output_dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    clean_targets: Option<Vec<f64>>,
}

/// Batches of labeled points share the dataset layout. For binary
/// classification the single target column holds labels in `{0, 1}`.
pub type LabeledBatch = Dataset;

impl Dataset {
    pub fn new(input_dim: usize, output_dim: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(contract("dataset dimensions must be positive"));
        }
        if inputs.len() % input_dim != 0 || targets.len() % output_dim != 0 {
            return Err(contract("dataset buffers are not whole rows"));
        }
        if inputs.len() / input_dim != targets.len() / output_dim {
            return Err(contract(format!(
                "{} inputs but {} targets",
                inputs.len() / input_dim,
                targets.len() / output_dim
            )));
        }
        Ok(Dataset {
            input_dim,
            output_dim,
            inputs,
            targets,
            clean_targets: None,
        })
    }

    /// Convenience constructor for scalar inputs and targets.
    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        let (x, y) = pairs.iter().copied().unzip();
        Dataset::new(1, 1, x, y).expect("pairs are consistent")
    }

    pub fn with_clean_targets(mut self, clean: Vec<f64>) -> Result<Self> {
        if clean.len() != self.targets.len() {
            return Err(contract("clean targets must match targets"));
        }
        self.clean_targets = Some(clean);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.targets.len() / self.output_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.output_dim..(i + 1) * self.output_dim]
    }

    pub fn clean_target(&self, i: usize) -> Option<&[f64]> {
        self.clean_targets
            .as_ref()
            .map(|c| &c[i * self.output_dim..(i + 1) * self.output_dim])
    }

    pub fn has_clean_targets(&self) -> bool {
        self.clean_targets.is_some()
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(idx.len() * self.input_dim);
        let mut targets = Vec::with_capacity(idx.len() * self.output_dim);
        let mut clean = self.clean_targets.as_ref().map(|_| Vec::new());
        for &i in idx {
            inputs.extend_from_slice(self.input(i));
            targets.extend_from_slice(self.target(i));
            if let (Some(c), Some(src)) = (clean.as_mut(), self.clean_target(i)) {
                c.extend_from_slice(src);
            }
        }
        Dataset {
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            inputs,
            targets,
            clean_targets: clean,
        }
    }

    /// Writes `x0..x{d-1},y0..y{k-1}` columns with a header row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let header: Vec<String> = (0..self.input_dim)
            .map(|j| format!("x{j}"))
            .chain((0..self.output_dim).map(|k| format!("y{k}")))
            .collect();
        wr.write_record(&header)?;
        for i in 0..self.len() {
            let row: Vec<String> = self
                .input(i)
                .iter()
                .chain(self.target(i))
                .map(|v| v.to_string())
                .collect();
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let input_dim = header.iter().filter(|h| h.starts_with('x')).count();
        let output_dim = header.len() - input_dim;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|e| FrmError::Io(format!("bad number `{field}`: {e}")))?;
                if j < input_dim {
                    inputs.push(v);
                } else {
                    targets.push(v);
                }
            }
        }
        Dataset::new(input_dim, output_dim, inputs, targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_buffers() {
        assert!(Dataset::new(2, 1, vec![1.0, 2.0, 3.0], vec![1.0]).is_err());
        assert!(Dataset::new(1, 1, vec![1.0, 2.0], vec![1.0]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = Dataset::new(2, 1, vec![0.1, -2.5, 3.0, 1e-9], vec![0.25, -7.0]).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x0,x1,y0\n"));
        assert_eq!(Dataset::read_csv(buf.as_slice()).unwrap(), d);
    }
}
