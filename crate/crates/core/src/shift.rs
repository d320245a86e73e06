//! Cameron-Martin shifts represented by piecewise-constant densities.
//!
//! A shift `u` is the primitive of a density `u_dot` that is constant on
//! each grid interval `[t_k, t_{k+1})`. With this representation the H-norm
//! `|u|_H^2 = sum_k |u_dot_k|^2 dt`, stochastic integrals against the shift,
//! and retarded (delayed) shifts are all exact finite sums.

use crate::error::{Error, Result};
use crate::grid::{Path, TimeGrid};

/// How much information the density at step `k` is allowed to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adaptedness {
    /// Density depends on time only.
    Deterministic,
    /// Density depends on the current state of the controlled system.
    MarkovFeedback,
    /// Density at step `k` depends on path values at nodes `0..=k - delay`.
    /// `delay >= 1` gives a strictly retarded shift.
    PathFunctional { delay: usize },
}

impl Adaptedness {
    /// Retarded-or-deterministic shifts are left-invertible by construction.
    pub fn certified_invertible(&self) -> bool {
        match self {
            Adaptedness::Deterministic => true,
            Adaptedness::MarkovFeedback => false,
            Adaptedness::PathFunctional { delay } => *delay >= 1,
        }
    }
}

/// One realization of a shift: the density values `u_dot_k` (stride `dim`),
/// together with the adaptedness class the realization came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CameronMartinShift {
    grid: TimeGrid,
    dim: usize,
    density: Vec<f64>,
    adaptedness: Adaptedness,
}

impl CameronMartinShift {
    pub fn new(
        grid: TimeGrid,
        dim: usize,
        density: Vec<f64>,
        adaptedness: Adaptedness,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("shift dimension must be positive"));
        }
        if density.len() != grid.n_steps() * dim {
            return Err(Error::DimensionMismatch {
                context: "shift density",
                expected: grid.n_steps() * dim,
                actual: density.len(),
            });
        }
        if density.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("shift density must be finite"));
        }
        Ok(CameronMartinShift {
            grid,
            dim,
            density,
            adaptedness,
        })
    }

    pub fn zero(grid: TimeGrid, dim: usize) -> Self {
        CameronMartinShift {
            grid,
            dim,
            density: vec![0.0; grid.n_steps() * dim],
            adaptedness: Adaptedness::Deterministic,
        }
    }

    /// Deterministic shift from a function of time, evaluated at the left
    /// node of every interval.
    pub fn from_fn(grid: TimeGrid, dim: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let mut density = Vec::with_capacity(grid.n_steps() * dim);
        for k in 0..grid.n_steps() {
            let v = f(grid.node(k));
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "shift density function",
                    expected: dim,
                    actual: v.len(),
                });
            }
            density.extend_from_slice(&v);
        }
        CameronMartinShift::new(grid, dim, density, Adaptedness::Deterministic)
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn adaptedness(&self) -> Adaptedness {
        self.adaptedness
    }

    /// Density value on `[t_k, t_{k+1})`.
    pub fn density_at(&self, k: usize) -> &[f64] {
        &self.density[k * self.dim..(k + 1) * self.dim]
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    /// `|u|_H^2 = sum_k |u_dot_k|^2 dt`.
    pub fn norm_sq(&self) -> f64 {
        let dt = self.grid.dt();
        self.density.chunks_exact(self.dim).fold(0.0, |acc, row| {
            acc + row.iter().map(|v| v * v).sum::<f64>() * dt
        })
    }

    /// The path `h(t_k) = sum_{j < k} u_dot_j dt`, with `h(0) = 0`.
    pub fn integral(&self) -> Path {
        let dt = self.grid.dt();
        let scaled: Vec<f64> = self.density.iter().map(|v| v * dt).collect();
        Path::from_increments(self.grid, self.dim, &scaled).expect("density length is validated")
    }

    pub fn scaled(&self, a: f64) -> Self {
        CameronMartinShift {
            grid: self.grid,
            dim: self.dim,
            density: self.density.iter().map(|v| a * v).collect(),
            adaptedness: self.adaptedness,
        }
    }

    pub fn plus(&self, other: &CameronMartinShift) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(
                self.grid.n_steps(),
                other.grid.n_steps(),
            ));
        }
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                context: "shift sum",
                expected: self.dim,
                actual: other.dim,
            });
        }
        let density = self
            .density
            .iter()
            .zip(&other.density)
            .map(|(a, b)| a + b)
            .collect();
        // The sum is only as adapted as the less predictable summand.
        let adaptedness = match (self.adaptedness, other.adaptedness) {
            (Adaptedness::Deterministic, a) | (a, Adaptedness::Deterministic) => a,
            (Adaptedness::PathFunctional { delay: r }, Adaptedness::PathFunctional { delay: s }) => {
                Adaptedness::PathFunctional { delay: r.min(s) }
            }
            _ => Adaptedness::MarkovFeedback,
        };
        CameronMartinShift::new(self.grid, self.dim, density, adaptedness)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(n).unwrap()
    }

    #[test]
    fn zero_density_has_zero_norm_and_zero_integral() {
        let u = CameronMartinShift::zero(grid(8), 2);
        assert_eq!(u.norm_sq(), 0.0);
        assert!(u.integral().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_density_norm_is_one() {
        // sum_k 1^2 * dt = 1 on any grid.
        for n in [1usize, 5, 64] {
            let u = CameronMartinShift::new(
                grid(n),
                1,
                vec![1.0; n],
                Adaptedness::Deterministic,
            )
            .unwrap();
            assert!((u.norm_sq() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn node_valued_density_hand_sum() {
        // u_dot_k = t_k on 4 steps: 0.25 * (0^2 + 0.25^2 + 0.5^2 + 0.75^2) = 0.21875.
        let g = grid(4);
        let u = CameronMartinShift::from_fn(g, 1, |t| vec![t]).unwrap();
        assert!((u.norm_sq() - 0.21875).abs() < 1e-15);
    }

    #[test]
    fn unit_density_integrates_to_time() {
        let g = grid(16);
        let u = CameronMartinShift::from_fn(g, 1, |_| vec![1.0]).unwrap();
        let h = u.integral();
        for k in 0..=16 {
            assert!((h.node(k)[0] - g.node(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn two_dim_integration_is_coordinatewise() {
        let g = grid(8);
        let u = CameronMartinShift::from_fn(g, 2, |_| vec![1.0, -1.0]).unwrap();
        let h = u.integral();
        for k in 0..=8 {
            assert!((h.node(k)[0] - g.node(k)).abs() < 1e-15);
            assert!((h.node(k)[1] + g.node(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn density_length_is_validated() {
        assert!(CameronMartinShift::new(grid(4), 1, vec![0.0; 3], Adaptedness::Deterministic)
            .is_err());
        assert!(CameronMartinShift::new(
            grid(4),
            1,
            vec![0.0, f64::NAN, 0.0, 0.0],
            Adaptedness::Deterministic
        )
        .is_err());
    }
}
