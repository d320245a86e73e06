//! Diffusion coefficients: the pair (sigma, b) with declared bounds.
//!
//! `sigma: R^m -> M_{m,d}` and `b: R^m -> R^m` must be bounded and Lipschitz;
//! the bounds are declared by the caller and spot-checked on a randomized
//! sample of points, since they cannot be inferred from closures.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::stream::RandomStream;

type MatrixFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// The pair (sigma, b) with its metadata. `sigma` writes a row-major
/// `m x d` matrix into the output slice; `b` writes an `m`-vector.
#[derive(Clone)]
pub struct CoefficientField {
    pub m: usize,
    pub d: usize,
    sigma: MatrixFn,
    b: VectorFn,
    pub sigma_bound: f64,
    pub b_bound: f64,
    pub sigma_lipschitz: f64,
    pub b_lipschitz: f64,
    pub initial_point: Vec<f64>,
    /// Set when sigma does not depend on the state; lets consumers reuse
    /// one pseudo-inverse for the whole trajectory.
    pub constant_sigma: bool,
    /// d sigma / dx and d b / dx for scalar systems (m = d = 1), used by
    /// pathwise gradients. Optional: systems without declared derivatives
    /// are optimized with SPSA or finite differences.
    scalar_derivatives: Option<(ScalarFn, ScalarFn)>,
}

impl std::fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientField")
            .field("m", &self.m)
            .field("d", &self.d)
            .field("sigma_bound", &self.sigma_bound)
            .field("b_bound", &self.b_bound)
            .field("sigma_lipschitz", &self.sigma_lipschitz)
            .field("b_lipschitz", &self.b_lipschitz)
            .field("initial_point", &self.initial_point)
            .field("constant_sigma", &self.constant_sigma)
            .finish()
    }
}

#[allow(clippy::too_many_arguments)]
impl CoefficientField {
    pub fn new(
        m: usize,
        d: usize,
        sigma: MatrixFn,
        b: VectorFn,
        sigma_bound: f64,
        b_bound: f64,
        sigma_lipschitz: f64,
        b_lipschitz: f64,
        initial_point: Vec<f64>,
    ) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::invalid("state and driver dimensions must be positive"));
        }
        if m > d {
            return Err(Error::invalid(format!(
                "state dimension m = {m} must not exceed driver dimension d = {d}"
            )));
        }
        if initial_point.len() != m {
            return Err(Error::DimensionMismatch {
                context: "initial point",
                expected: m,
                actual: initial_point.len(),
            });
        }
        Ok(CoefficientField {
            m,
            d,
            sigma,
            b,
            sigma_bound,
            b_bound,
            sigma_lipschitz,
            b_lipschitz,
            initial_point,
            constant_sigma: false,
            scalar_derivatives: None,
        })
    }

    pub fn with_constant_sigma(mut self) -> Self {
        self.constant_sigma = true;
        self
    }

    pub fn with_scalar_derivatives(
        mut self,
        sigma_deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
        b_deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.scalar_derivatives = Some((Arc::new(sigma_deriv), Arc::new(b_deriv)));
        self
    }

    pub fn sigma_into(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.m);
        debug_assert_eq!(out.len(), self.m * self.d);
        (self.sigma)(y, out);
    }

    pub fn b_into(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.m);
        debug_assert_eq!(out.len(), self.m);
        (self.b)(y, out);
    }

    pub fn has_scalar_derivatives(&self) -> bool {
        self.m == 1 && self.d == 1 && self.scalar_derivatives.is_some()
    }

    /// `(sigma(x), sigma'(x), b(x), b'(x))` for scalar systems.
    pub fn scalar_with_derivatives(&self, x: f64) -> Option<(f64, f64, f64, f64)> {
        if self.m != 1 || self.d != 1 {
            return None;
        }
        let (ds, db) = self.scalar_derivatives.as_ref()?;
        let mut s = [0.0];
        let mut b = [0.0];
        self.sigma_into(&[x], &mut s);
        self.b_into(&[x], &mut b);
        Some((s[0], ds(x), b[0], db(x)))
    }

    /// Spot-check the declared bounds and Lipschitz constants on a seeded
    /// random sample of points around the initial condition.
    pub fn validate(&self, n_points: usize, radius: f64) -> Result<()> {
        let mut rng = RandomStream::new(0x5eed_c0ef, 0).rng();
        let mut points = Vec::with_capacity(n_points);
        for _ in 0..n_points {
            let p: Vec<f64> = (0..self.m)
                .map(|i| self.initial_point[i] + rng.random_range(-radius..radius))
                .collect();
            points.push(p);
        }
        let mut sig = vec![0.0; self.m * self.d];
        let mut bv = vec![0.0; self.m];
        let mut sigs = Vec::with_capacity(n_points);
        let mut bs = Vec::with_capacity(n_points);
        for p in &points {
            self.sigma_into(p, &mut sig);
            self.b_into(p, &mut bv);
            if sig.iter().chain(bv.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid("coefficients produced a non-finite value"));
            }
            let sig_norm = frobenius(&sig);
            if sig_norm > self.sigma_bound {
                return Err(Error::invalid(format!(
                    "|sigma(y)| = {sig_norm} exceeds the declared bound {}",
                    self.sigma_bound
                )));
            }
            let b_norm = frobenius(&bv);
            if b_norm > self.b_bound {
                return Err(Error::invalid(format!(
                    "|b(y)| = {b_norm} exceeds the declared bound {}",
                    self.b_bound
                )));
            }
            sigs.push(sig.clone());
            bs.push(bv.clone());
        }
        // No modeling slack on the declared constants; the guard below only
        // absorbs the rounding of the difference quotient itself.
        let rounding = 1.0 + 1e-12;
        for i in 0..n_points {
            for j in (i + 1)..n_points {
                let dist = euclid_dist(&points[i], &points[j]);
                if dist == 0.0 {
                    continue;
                }
                let dsig = frobenius_dist(&sigs[i], &sigs[j]);
                if dsig > self.sigma_lipschitz * dist * rounding {
                    return Err(Error::invalid(format!(
                        "sigma difference quotient {} exceeds declared Lipschitz constant {}",
                        dsig / dist,
                        self.sigma_lipschitz
                    )));
                }
                let db = frobenius_dist(&bs[i], &bs[j]);
                if db > self.b_lipschitz * dist * rounding {
                    return Err(Error::invalid(format!(
                        "b difference quotient {} exceeds declared Lipschitz constant {}",
                        db / dist,
                        self.b_lipschitz
                    )));
                }
            }
        }
        Ok(())
    }
}

fn frobenius(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn frobenius_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn euclid_dist(a: &[f64], b: &[f64]) -> f64 {
    frobenius_dist(a, b)
}

/// Ready-made coefficient fields used across the test batteries and the CLI.
pub mod presets {
    use super::*;

    /// m = d = 1, sigma = 1, b = 0, c = 0: the state is the driving motion.
    pub fn brownian() -> CoefficientField {
        CoefficientField::new(
            1,
            1,
            Arc::new(|_y, out| out[0] = 1.0),
            Arc::new(|_y, out| out[0] = 0.0),
            1.0,
            0.0,
            0.0,
            0.0,
            vec![0.0],
        )
        .expect("static preset")
        .with_constant_sigma()
        .with_scalar_derivatives(|_| 0.0, |_| 0.0)
    }

    /// m = 1, d = 2, sigma = [1 0], b = 0: rank-deficient driver, the second
    /// driver coordinate never reaches the state.
    pub fn degenerate_row() -> CoefficientField {
        CoefficientField::new(
            1,
            2,
            Arc::new(|_y, out| {
                out[0] = 1.0;
                out[1] = 0.0;
            }),
            Arc::new(|_y, out| out[0] = 0.0),
            1.0,
            0.0,
            0.0,
            0.0,
            vec![0.0],
        )
        .expect("static preset")
        .with_constant_sigma()
    }

    /// m = d = 1, sigma(y) = 1 + 0.5 sin y, b(y) = -0.25 sin y.
    pub fn sinusoidal() -> CoefficientField {
        CoefficientField::new(
            1,
            1,
            Arc::new(|y, out| out[0] = 1.0 + 0.5 * y[0].sin()),
            Arc::new(|y, out| out[0] = -0.25 * y[0].sin()),
            1.5,
            0.25,
            0.5,
            0.25,
            vec![0.0],
        )
        .expect("static preset")
        .with_scalar_derivatives(|y| 0.5 * y.cos(), |y| -0.25 * y.cos())
    }

    /// m = d = 1, constant sigma and b.
    pub fn constant_scalar(sigma0: f64, b0: f64, c: f64) -> Result<CoefficientField> {
        if !sigma0.is_finite() || !b0.is_finite() || !c.is_finite() {
            return Err(Error::invalid("constant preset parameters must be finite"));
        }
        Ok(CoefficientField::new(
            1,
            1,
            Arc::new(move |_y, out| out[0] = sigma0),
            Arc::new(move |_y, out| out[0] = b0),
            sigma0.abs(),
            b0.abs(),
            0.0,
            0.0,
            vec![c],
        )?
        .with_constant_sigma()
        .with_scalar_derivatives(|_| 0.0, |_| 0.0))
    }

    /// m = d = 1, sigma(y) = sigma0 + slope * clamp(y, -radius, radius):
    /// affine inside the clamp window, constant outside, so the global
    /// bound and Lipschitz constant stay finite.
    pub fn affine_clipped(sigma0: f64, slope: f64, radius: f64) -> Result<CoefficientField> {
        if radius <= 0.0 {
            return Err(Error::invalid("clamp radius must be positive"));
        }
        let lo = sigma0 - slope.abs() * radius;
        if lo <= 0.0 {
            return Err(Error::invalid(
                "affine preset must keep sigma positive on the clamp window",
            ));
        }
        Ok(CoefficientField::new(
            1,
            1,
            Arc::new(move |y, out| out[0] = sigma0 + slope * y[0].clamp(-radius, radius)),
            Arc::new(|_y, out| out[0] = 0.0),
            sigma0 + slope.abs() * radius,
            0.0,
            slope.abs(),
            0.0,
            vec![0.0],
        )?
        .with_scalar_derivatives(
            move |y| if y.abs() < radius { slope } else { 0.0 },
            |_| 0.0,
        ))
    }
}
