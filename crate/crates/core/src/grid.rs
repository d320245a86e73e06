//! Uniform time grids on [0, 1] and discretized paths.
//!
//! Everything in this crate runs on the unit horizon: a grid with `n_steps`
//! steps has nodes `t_k = k / n_steps`, and a path stores one point of
//! `R^dim` per node.

use crate::error::{Error, Result};

/// Uniform grid on [0, 1] with `n_steps` steps of length `dt = 1 / n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    n_steps: usize,
}

impl TimeGrid {
    /// The time horizon is fixed to 1.
    pub const HORIZON: f64 = 1.0;

    pub fn new(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::invalid("time grid needs at least one step"));
        }
        let grid = TimeGrid { n_steps };
        debug_assert!((grid.dt() * n_steps as f64 - Self::HORIZON).abs() <= f64::EPSILON);
        Ok(grid)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        Self::HORIZON / self.n_steps as f64
    }

    /// Node `t_k = k * dt` for `k` in `0..=n_steps`.
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.n_steps);
        k as f64 * self.dt()
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.node(k))
    }
}

/// Discretized path: `n_steps + 1` points of `R^dim`, stored flat with
/// stride `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl Path {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("path dimension must be positive"));
        }
        let expected = (grid.n_steps() + 1) * dim;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "path values",
                expected,
                actual: values.len(),
            });
        }
        Ok(Path { grid, dim, values })
    }

    pub fn zero(grid: TimeGrid, dim: usize) -> Self {
        Path {
            grid,
            dim,
            values: vec![0.0; (grid.n_steps() + 1) * dim],
        }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The point at node `k`.
    pub fn node(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn node_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.node(self.grid.n_steps())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Flat view of nodes `0..=k`, for adapted functionals.
    pub fn prefix(&self, k: usize) -> &[f64] {
        &self.values[..(k + 1) * self.dim]
    }

    /// Cumulative sums of flat increments (stride `dim`), starting at zero.
    pub fn from_increments(grid: TimeGrid, dim: usize, increments: &[f64]) -> Result<Self> {
        if increments.len() != grid.n_steps() * dim {
            return Err(Error::DimensionMismatch {
                context: "increments",
                expected: grid.n_steps() * dim,
                actual: increments.len(),
            });
        }
        let mut path = Path::zero(grid, dim);
        for k in 0..grid.n_steps() {
            for i in 0..dim {
                path.values[(k + 1) * dim + i] =
                    path.values[k * dim + i] + increments[k * dim + i];
            }
        }
        Ok(path)
    }

    /// Flat increment vector, stride `dim`.
    pub fn increments(&self) -> Vec<f64> {
        let n = self.grid.n_steps();
        let mut out = vec![0.0; n * self.dim];
        for k in 0..n {
            for i in 0..self.dim {
                out[k * self.dim + i] =
                    self.values[(k + 1) * self.dim + i] - self.values[k * self.dim + i];
            }
        }
        out
    }

    /// Largest node-wise absolute difference against another path.
    pub fn max_abs_diff(&self, other: &Path) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_nodes_are_increasing_and_hit_the_horizon() {
        for n in [1usize, 3, 4, 7, 64, 1000] {
            let grid = TimeGrid::new(n).unwrap();
            let nodes: Vec<f64> = grid.nodes().collect();
            assert_eq!(nodes.len(), n + 1);
            assert_eq!(nodes[0], 0.0);
            assert!((nodes[n] - TimeGrid::HORIZON).abs() <= f64::EPSILON);
            assert!(nodes.windows(2).all(|w| w[0] < w[1]));
            assert!((grid.dt() * n as f64 - TimeGrid::HORIZON).abs() <= f64::EPSILON);
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(TimeGrid::new(0).is_err());
    }

    #[test]
    fn path_length_validated() {
        let grid = TimeGrid::new(4).unwrap();
        assert!(Path::new(grid, 2, vec![0.0; 10]).is_ok());
        assert!(Path::new(grid, 2, vec![0.0; 9]).is_err());
        assert!(Path::new(grid, 0, vec![]).is_err());
    }

    #[test]
    fn increments_round_trip() {
        let grid = TimeGrid::new(3).unwrap();
        let p = Path::new(grid, 1, vec![0.0, 1.0, -0.5, 2.0]).unwrap();
        let inc = p.increments();
        let q = Path::from_increments(grid, 1, &inc).unwrap();
        assert_eq!(p.max_abs_diff(&q), 0.0);
    }
}
