use serde::{Deserialize, Serialize};

use super::Model;
use crate::scalar::Scalar;

pub const GRID_SIDE: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Uniform,
    Focused,
}

impl GridKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GridKind::Uniform => "uniform",
            GridKind::Focused => "focused",
        }
    }
}

impl std::str::FromStr for GridKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(GridKind::Uniform),
            "focused" => Ok(GridKind::Focused),
            other => Err(format!("unknown grid kind `{other}`")),
        }
    }
}

/// Gaussian radial basis functions on the normalized state square `[0,1]²`.
///
/// Centers are stored row-major over (position, velocity): index
/// `i * 15 + j` holds position node `i` and velocity node `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfGrid {
    pub centers: Vec<[f64; 2]>,
    pub bandwidths: Vec<f64>,
    pub kind: GridKind,
}

impl RbfGrid {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Per-axis node coordinates for a grid kind.
pub fn axis_nodes(kind: GridKind) -> Vec<f64> {
    let n = GRID_SIDE;
    match kind {
        GridKind::Uniform => (0..n).map(|j| j as f64 / (n - 1) as f64).collect(),
        GridKind::Focused => (0..n)
            .map(|j| {
                let u = -1.0 + 2.0 * j as f64 / (n - 1) as f64;
                0.5 + 0.5 * u.signum() * u * u
            })
            .collect(),
    }
}

/// Distance from each node to its nearest neighbour along the axis.
fn nearest_spacing(nodes: &[f64]) -> Vec<f64> {
    (0..nodes.len())
        .map(|j| {
            let left = if j > 0 { nodes[j] - nodes[j - 1] } else { f64::INFINITY };
            let right = if j + 1 < nodes.len() {
                nodes[j + 1] - nodes[j]
            } else {
                f64::INFINITY
            };
            left.min(right)
        })
        .collect()
}

pub fn build_rbf_grid(kind: GridKind) -> RbfGrid {
    let nodes = axis_nodes(kind);
    let spacing = nearest_spacing(&nodes);
    let mut centers = Vec::with_capacity(GRID_SIDE * GRID_SIDE);
    let mut bandwidths = Vec::with_capacity(GRID_SIDE * GRID_SIDE);
    for (i, &p) in nodes.iter().enumerate() {
        for (j, &v) in nodes.iter().enumerate() {
            centers.push([p, v]);
            // on a tensor grid the nearest 2-D neighbour lies along one axis
            bandwidths.push(spacing[i].min(spacing[j]));
        }
    }
    RbfGrid {
        centers,
        bandwidths,
        kind,
    }
}

/// `exp(−|s − c_k|² / (2 b_k²))` for every center; the state is clamped to `[0,1]²`.
pub fn rbf_features(grid: &RbfGrid, state: [f64; 2]) -> Vec<f64> {
    let s = [state[0].clamp(0.0, 1.0), state[1].clamp(0.0, 1.0)];
    grid.centers
        .iter()
        .zip(&grid.bandwidths)
        .map(|(c, b)| {
            let d0 = s[0] - c[0];
            let d1 = s[1] - c[1];
            (-(d0 * d0 + d1 * d1) / (2.0 * b * b)).exp()
        })
        .collect()
}

/// Linear value function over RBF features, optionally with a constant bias
/// feature appended last.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfLinearModel {
    pub grid: RbfGrid,
    pub bias: bool,
}

impl RbfLinearModel {
    pub fn new(grid: RbfGrid, bias: bool) -> Self {
        RbfLinearModel { grid, bias }
    }

    pub fn features(&self, state: [f64; 2]) -> Vec<f64> {
        let mut f = rbf_features(&self.grid, state);
        if self.bias {
            f.push(1.0);
        }
        f
    }
}

impl Model for RbfLinearModel {
    fn num_params(&self) -> usize {
        self.grid.len() + usize::from(self.bias)
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn forward<T: Scalar>(&self, params: &[T], x: &[f64]) -> Vec<T> {
        let phi = self.features([x[0], x[1]]);
        let mut acc = T::zero();
        for (p, f) in params.iter().zip(&phi) {
            acc += p.scale(*f);
        }
        vec![acc]
    }

    fn vjp<T: Scalar>(&self, _params: &[T], x: &[f64], w: &[T]) -> Vec<T> {
        self.features([x[0], x[1]])
            .into_iter()
            .map(|f| w[0].scale(f))
            .collect()
    }
}
