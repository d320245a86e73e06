//! Euler scheme for controlled diffusions, reconstruction of the driving
//! Brownian motion from the pair (state, independent noise), perturbed
//! systems, and the composition law.
//!
//! The control is folded into the increment, `X_{k+1} = X_k +
//! sigma(X_k) (dB_k + u_dot_k dt) + b(X_k) dt`, which keeps the composition
//! and pull-back identities exact at the discrete level instead of
//! O(sqrt(dt)).

use nalgebra::{DMatrix, DVector};

use crate::coeffs::CoefficientField;
use crate::error::{Error, Result};
use crate::grid::{Path, TimeGrid};
use crate::pinv::{theta_eta, theta_row, DEFAULT_RANK_TOLERANCE};
use crate::shift::{Adaptedness, CameronMartinShift};

/// An adapted control: supplies the shift density step by step.
///
/// `x_prefix` and `driver_prefix` hold the flat node values (stride `m`,
/// resp. `d`) available when step `k` starts, i.e. nodes `0..=k`. Whether the
/// prefixes belong to the controlled system (closed loop) or to a fixed input
/// path (shift map) is decided by the call site.
pub trait Control: Sync {
    fn dim(&self) -> usize;

    fn adaptedness(&self) -> Adaptedness;

    /// Write the density on `[t_k, t_{k+1})` into `out` (length `dim`).
    /// Returns `true` when the value was clipped.
    fn density_at(
        &self,
        k: usize,
        t: f64,
        x_prefix: &[f64],
        driver_prefix: &[f64],
        out: &mut [f64],
    ) -> bool;
}

impl Control for CameronMartinShift {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn adaptedness(&self) -> Adaptedness {
        self.adaptedness()
    }

    fn density_at(
        &self,
        k: usize,
        _t: f64,
        _x_prefix: &[f64],
        _driver_prefix: &[f64],
        out: &mut [f64],
    ) -> bool {
        out.copy_from_slice(self.density_at(k));
        false
    }
}

fn check_driver(coeffs: &CoefficientField, grid: TimeGrid, driver: &[f64]) -> Result<()> {
    if driver.len() != grid.n_steps() * coeffs.d {
        return Err(Error::DimensionMismatch {
            context: "driver increments",
            expected: grid.n_steps() * coeffs.d,
            actual: driver.len(),
        });
    }
    Ok(())
}

/// Euler scheme with an optional realized shift. With `shift` absent this is
/// the base diffusion itself.
pub fn euler_maruyama(
    coeffs: &CoefficientField,
    grid: TimeGrid,
    driver: &[f64],
    shift: Option<&CameronMartinShift>,
) -> Result<Path> {
    check_driver(coeffs, grid, driver)?;
    if let Some(u) = shift {
        if u.dim() != coeffs.d {
            return Err(Error::DimensionMismatch {
                context: "shift density dimension",
                expected: coeffs.d,
                actual: u.dim(),
            });
        }
        if u.grid() != grid {
            return Err(Error::GridMismatch(grid.n_steps(), u.grid().n_steps()));
        }
    }
    let (m, d) = (coeffs.m, coeffs.d);
    let dt = grid.dt();
    let mut x = Path::zero(grid, m);
    x.node_mut(0).copy_from_slice(&coeffs.initial_point);
    let mut sigma = vec![0.0; m * d];
    let mut b = vec![0.0; m];
    for k in 0..grid.n_steps() {
        let xk = x.node(k).to_vec();
        coeffs.sigma_into(&xk, &mut sigma);
        coeffs.b_into(&xk, &mut b);
        let drive = &driver[k * d..(k + 1) * d];
        let u_row = shift.map(|u| u.density_at(k));
        let next = x.node_mut(k + 1);
        for i in 0..m {
            let mut acc = xk[i] + b[i] * dt;
            for j in 0..d {
                let inc = drive[j] + u_row.map_or(0.0, |r| r[j]) * dt;
                acc += sigma[i * d + j] * inc;
            }
            next[i] = acc;
        }
    }
    Ok(x)
}

/// Closed-loop Euler scheme: the control sees the controlled state as it is
/// built. Returns the trajectory together with the realized shift density.
pub fn euler_with_control(
    coeffs: &CoefficientField,
    grid: TimeGrid,
    driver: &[f64],
    control: &dyn Control,
) -> Result<(Path, CameronMartinShift, usize)> {
    check_driver(coeffs, grid, driver)?;
    if control.dim() != coeffs.d {
        return Err(Error::DimensionMismatch {
            context: "control dimension",
            expected: coeffs.d,
            actual: control.dim(),
        });
    }
    let (m, d) = (coeffs.m, coeffs.d);
    let dt = grid.dt();
    let n = grid.n_steps();
    let mut x = Path::zero(grid, m);
    x.node_mut(0).copy_from_slice(&coeffs.initial_point);
    let driver_path = Path::from_increments(grid, d, driver)?;
    let mut density = vec![0.0; n * d];
    let mut sigma = vec![0.0; m * d];
    let mut b = vec![0.0; m];
    let mut u_row = vec![0.0; d];
    let mut clipped = 0usize;
    for k in 0..n {
        let xk = x.node(k).to_vec();
        if control.density_at(k, grid.node(k), x.prefix(k), driver_path.prefix(k), &mut u_row) {
            clipped += 1;
        }
        density[k * d..(k + 1) * d].copy_from_slice(&u_row);
        coeffs.sigma_into(&xk, &mut sigma);
        coeffs.b_into(&xk, &mut b);
        let drive = &driver[k * d..(k + 1) * d];
        let next = x.node_mut(k + 1);
        for i in 0..m {
            let mut acc = xk[i] + b[i] * dt;
            for j in 0..d {
                acc += sigma[i * d + j] * (drive[j] + u_row[j] * dt);
            }
            next[i] = acc;
        }
    }
    let realized = CameronMartinShift::new(grid, d, density, control.adaptedness())?;
    Ok((x, realized, clipped))
}

/// Rebuild the driving Brownian motion from the state and an independent
/// d-dimensional noise path: increments
/// `theta(X_k) (dX_k - b(X_k) dt) + eta(X_k) dB_k`.
pub fn reconstruct_beta(x: &Path, b_path: &Path, coeffs: &CoefficientField) -> Result<Path> {
    if x.dim() != coeffs.m {
        return Err(Error::DimensionMismatch {
            context: "state path dimension",
            expected: coeffs.m,
            actual: x.dim(),
        });
    }
    if b_path.dim() != coeffs.d {
        return Err(Error::DimensionMismatch {
            context: "noise path dimension",
            expected: coeffs.d,
            actual: b_path.dim(),
        });
    }
    if x.grid() != b_path.grid() {
        return Err(Error::GridMismatch(
            x.grid().n_steps(),
            b_path.grid().n_steps(),
        ));
    }
    let grid = x.grid();
    let (m, d) = (coeffs.m, coeffs.d);
    let dt = grid.dt();
    let n = grid.n_steps();
    let mut beta = Path::zero(grid, d);
    let mut sigma = vec![0.0; m * d];
    let mut b = vec![0.0; m];
    let mut theta_buf = vec![0.0; d];
    let mut cached_pair = None;
    for k in 0..n {
        let xk = x.node(k);
        coeffs.sigma_into(xk, &mut sigma);
        coeffs.b_into(xk, &mut b);
        let mut dm = vec![0.0; m];
        for i in 0..m {
            dm[i] = x.node(k + 1)[i] - xk[i] - b[i] * dt;
        }
        let db: Vec<f64> = (0..d)
            .map(|j| b_path.node(k + 1)[j] - b_path.node(k)[j])
            .collect();
        let out_prev: Vec<f64> = beta.node(k).to_vec();
        let out = beta.node_mut(k + 1);
        if m == 1 {
            // theta = sigma^T / |sigma|^2; eta v = v - theta (sigma v).
            theta_row(&sigma, &mut theta_buf);
            let sigma_dot_db: f64 = sigma.iter().zip(&db).map(|(s, v)| s * v).sum();
            for j in 0..d {
                let inc = theta_buf[j] * dm[0] + db[j] - theta_buf[j] * sigma_dot_db;
                out[j] = out_prev[j] + inc;
            }
        } else {
            let sigma_mat = DMatrix::from_row_slice(m, d, &sigma);
            let pair = if coeffs.constant_sigma {
                if cached_pair.is_none() {
                    cached_pair = Some(theta_eta(&sigma_mat, DEFAULT_RANK_TOLERANCE)?);
                }
                cached_pair.as_ref().unwrap().clone()
            } else {
                theta_eta(&sigma_mat, DEFAULT_RANK_TOLERANCE)?
            };
            let inc = &pair.theta * DVector::from_column_slice(&dm)
                + &pair.eta * DVector::from_column_slice(&db);
            for j in 0..d {
                out[j] = out_prev[j] + inc[j];
            }
        }
    }
    Ok(beta)
}

/// The base system and its perturbation by a control.
#[derive(Debug, Clone)]
pub struct PerturbedSystem {
    pub base_x: Path,
    pub base_beta: Path,
    pub x_u: Path,
    pub beta_u: Path,
    /// Density realized along this trajectory (equals the control itself for
    /// deterministic shifts).
    pub realized_shift: CameronMartinShift,
    pub clipped_steps: usize,
}

/// Simulate the pair and its perturbation. When `noise` is given, the
/// driving motion is assembled canonically from the martingale part of the
/// state and the independent noise; otherwise the supplied increments are
/// used as the driving motion directly (same joint law).
pub fn perturbed_system(
    coeffs: &CoefficientField,
    grid: TimeGrid,
    driver: &[f64],
    noise: Option<&Path>,
    control: &dyn Control,
) -> Result<PerturbedSystem> {
    let base_x = euler_maruyama(coeffs, grid, driver, None)?;
    let (base_beta, beta_increments) = match noise {
        Some(b) => {
            let beta = reconstruct_beta(&base_x, b, coeffs)?;
            let inc = beta.increments();
            (beta, inc)
        }
        None => (
            Path::from_increments(grid, coeffs.d, driver)?,
            driver.to_vec(),
        ),
    };
    let (x_u, realized_shift, clipped_steps) =
        euler_with_control(coeffs, grid, &beta_increments, control)?;
    let shift_path = realized_shift.integral();
    let mut beta_u = base_beta.clone();
    for k in 0..=grid.n_steps() {
        for j in 0..coeffs.d {
            beta_u.node_mut(k)[j] += shift_path.node(k)[j];
        }
    }
    Ok(PerturbedSystem {
        base_x,
        base_beta,
        x_u,
        beta_u,
        realized_shift,
        clipped_steps,
    })
}

/// Apply the perturbation-by-`u` map to an arbitrary pair (state path,
/// driver path): rebuild the driving motion from the pair, evaluate the
/// control along the *input* pair, and rerun the scheme with the shifted
/// driver. Returns the output pair and the realized density of `u` along
/// the input.
pub fn apply_shift_map(
    coeffs: &CoefficientField,
    x: &Path,
    driver_path: &Path,
    control: &dyn Control,
) -> Result<(Path, Path, CameronMartinShift)> {
    let grid = x.grid();
    let beta = reconstruct_beta(x, driver_path, coeffs)?;
    let n = grid.n_steps();
    let d = coeffs.d;
    let mut density = vec![0.0; n * d];
    let mut row = vec![0.0; d];
    for k in 0..n {
        control.density_at(k, grid.node(k), x.prefix(k), beta.prefix(k), &mut row);
        density[k * d..(k + 1) * d].copy_from_slice(&row);
    }
    let realized = CameronMartinShift::new(grid, d, density, control.adaptedness())?;
    let beta_increments = beta.increments();
    let x_out = euler_maruyama(coeffs, grid, &beta_increments, Some(&realized))?;
    let shift_path = realized.integral();
    let mut beta_out = beta;
    for k in 0..=n {
        for j in 0..d {
            beta_out.node_mut(k)[j] += shift_path.node(k)[j];
        }
    }
    Ok((x_out, beta_out, realized))
}

#[derive(Debug, Clone, Copy)]
pub struct ComposeReport {
    pub max_state_discrepancy: f64,
    pub max_driver_discrepancy: f64,
}

/// Compare the two routes to the composed perturbation: applying the `u`-map
/// to the `v`-perturbed system versus a single perturbation by
/// `v + u` evaluated along the `v`-perturbed system.
pub fn compose_check(
    coeffs: &CoefficientField,
    grid: TimeGrid,
    u: &dyn Control,
    v: &dyn Control,
    driver: &[f64],
    noise: Option<&Path>,
) -> Result<ComposeReport> {
    let first = perturbed_system(coeffs, grid, driver, noise, v)?;
    let (lhs_x, lhs_beta, u_along_v) = apply_shift_map(coeffs, &first.x_u, &first.beta_u, u)?;

    let composed = first.realized_shift.plus(&u_along_v)?;
    let second = perturbed_system(coeffs, grid, driver, noise, &composed)?;

    Ok(ComposeReport {
        max_state_discrepancy: lhs_x.max_abs_diff(&second.x_u),
        max_driver_discrepancy: lhs_beta.max_abs_diff(&second.beta_u),
    })
}
