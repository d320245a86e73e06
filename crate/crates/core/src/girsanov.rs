//! Wick exponentials in log domain, reweighted expectations, and Monte
//! Carlo entropy estimators for shifted systems.
//!
//! The change-of-measure identity `E[f] = E[f(perturbed) rho(-delta u)]`
//! holds exactly in law at the discrete level for any adapted density, so
//! the two sides of every battery below may only differ by Monte Carlo
//! noise.

use rayon::prelude::*;

use crate::coeffs::CoefficientField;
use crate::error::{Error, Result};
use crate::functional::PathFunctional;
use crate::grid::{Path, TimeGrid};
use crate::sde::{euler_maruyama, euler_with_control, Control};
use crate::shift::CameronMartinShift;
use crate::stats::EstimateWithError;
use crate::stream::{brownian_increments, RandomStream};

/// Maximum tolerated fraction of rejected (non-finite) samples.
pub const MAX_REJECTED_FRACTION: f64 = 1e-3;

/// `log rho(delta_beta v) = sum_k <v_dot_k, dbeta_k> - 1/2 sum_k |v_dot_k|^2 dt`.
///
/// Callers wanting `rho(-delta v)` negate the shift first.
pub fn log_wick(v: &CameronMartinShift, driver_increments: &[f64]) -> Result<f64> {
    let dim = v.dim();
    let n = v.grid().n_steps();
    if driver_increments.len() != n * dim {
        return Err(Error::DimensionMismatch {
            context: "wick driver increments",
            expected: n * dim,
            actual: driver_increments.len(),
        });
    }
    let dt = v.grid().dt();
    let mut stochastic = 0.0;
    let mut energy = 0.0;
    for k in 0..n {
        let row = v.density_at(k);
        let inc = &driver_increments[k * dim..(k + 1) * dim];
        for j in 0..dim {
            stochastic += row[j] * inc[j];
            energy += row[j] * row[j];
        }
    }
    Ok(stochastic - 0.5 * energy * dt)
}

/// Both sides of the change-of-measure identity, estimated with common
/// random numbers.
#[derive(Debug, Clone)]
pub struct ReweightedExpectation {
    /// Plain estimate of `E[f]` under the base system.
    pub lhs: EstimateWithError,
    /// Estimate of `E[f(perturbed) rho(-delta u)]`.
    pub rhs: EstimateWithError,
    pub rejected: usize,
    /// The unit-mean condition on the reweighting density is certified for
    /// deterministic and strictly retarded bounded shifts; for anything
    /// else it is an assumption and recorded as such.
    pub girsanov_assumed: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReweightOptions {
    /// Test hook for the verification harness: flips the sign of the
    /// stochastic term of the log-weight, which must make the battery fail.
    pub flip_wick_sign: bool,
}

pub fn reweighted_expectation(
    f: &dyn PathFunctional,
    coeffs: &CoefficientField,
    grid: TimeGrid,
    control: &dyn Control,
    n_paths: usize,
    stream: RandomStream,
) -> Result<ReweightedExpectation> {
    reweighted_expectation_with(f, coeffs, grid, control, n_paths, stream, ReweightOptions::default())
}

pub fn reweighted_expectation_with(
    f: &dyn PathFunctional,
    coeffs: &CoefficientField,
    grid: TimeGrid,
    control: &dyn Control,
    n_paths: usize,
    stream: RandomStream,
    opts: ReweightOptions,
) -> Result<ReweightedExpectation> {
    if n_paths == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    let d = coeffs.d;
    let dt = grid.dt();
    let samples: Vec<Result<(f64, f64)>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let driver = brownian_increments(stream.offset(i as u64), grid, d)?;
            let base_x = euler_maruyama(coeffs, grid, &driver, None)?;
            let base_beta = Path::from_increments(grid, d, &driver)?;
            let lhs = f.eval(&base_x, &base_beta);

            let (x_u, realized, _) = euler_with_control(coeffs, grid, &driver, control)?;
            let shift_path = realized.integral();
            let mut beta_u = base_beta.clone();
            for k in 0..=grid.n_steps() {
                for j in 0..d {
                    beta_u.node_mut(k)[j] += shift_path.node(k)[j];
                }
            }
            // log rho(-delta u) along the base driver.
            let mut stochastic = 0.0;
            let mut energy = 0.0;
            for k in 0..grid.n_steps() {
                let row = realized.density_at(k);
                let inc = &driver[k * d..(k + 1) * d];
                for j in 0..d {
                    stochastic += row[j] * inc[j];
                    energy += row[j] * row[j];
                }
            }
            let sign = if opts.flip_wick_sign { 1.0 } else { -1.0 };
            let log_weight = sign * stochastic - 0.5 * energy * dt;
            let rhs = f.eval(&x_u, &beta_u) * log_weight.exp();
            Ok((lhs, rhs))
        })
        .collect();

    let mut lhs_vals = Vec::with_capacity(n_paths);
    let mut rhs_vals = Vec::with_capacity(n_paths);
    let mut rejected = 0usize;
    for s in samples {
        let (l, r) = s?;
        if l.is_finite() && r.is_finite() {
            lhs_vals.push(l);
            rhs_vals.push(r);
        } else {
            rejected += 1;
        }
    }
    if (rejected as f64) > MAX_REJECTED_FRACTION * n_paths as f64 {
        return Err(Error::numerical(format!(
            "{rejected} of {n_paths} samples rejected as non-finite"
        )));
    }
    if lhs_vals.is_empty() {
        return Err(Error::numerical("all samples rejected"));
    }
    Ok(ReweightedExpectation {
        lhs: EstimateWithError::from_samples(&lhs_vals)?,
        rhs: EstimateWithError::from_samples(&rhs_vals)?,
        rejected,
        girsanov_assumed: !control.adaptedness().certified_invertible(),
    })
}

/// Realize an adapted control along base trajectories and return the
/// per-path realized shifts (used by the entropy estimators).
fn realized_shifts(
    coeffs: &CoefficientField,
    grid: TimeGrid,
    control: &dyn Control,
    n_paths: usize,
    stream: RandomStream,
) -> Result<Vec<(CameronMartinShift, Vec<f64>)>> {
    (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let driver = brownian_increments(stream.offset(i as u64), grid, coeffs.d)?;
            let base_x = euler_maruyama(coeffs, grid, &driver, None)?;
            let base_beta = Path::from_increments(grid, coeffs.d, &driver)?;
            let n = grid.n_steps();
            let d = coeffs.d;
            let mut density = vec![0.0; n * d];
            let mut row = vec![0.0; d];
            for k in 0..n {
                control.density_at(k, grid.node(k), base_x.prefix(k), base_beta.prefix(k), &mut row);
                density[k * d..(k + 1) * d].copy_from_slice(&row);
            }
            let shift = CameronMartinShift::new(grid, d, density, control.adaptedness())?;
            Ok((shift, driver))
        })
        .collect()
}

/// Relative entropy of the shifted law for certified-invertible shifts:
/// equals half the mean Cameron-Martin energy. Rejects controls whose
/// adaptedness class does not certify left-invertibility.
pub fn entropy_if_invertible(
    control: &dyn Control,
    coeffs: &CoefficientField,
    grid: TimeGrid,
    n_paths: usize,
    stream: RandomStream,
) -> Result<EstimateWithError> {
    if !control.adaptedness().certified_invertible() {
        return Err(Error::invalid(
            "entropy criterion applies only to deterministic or strictly retarded shifts",
        ));
    }
    if matches!(control.adaptedness(), crate::shift::Adaptedness::Deterministic) {
        // State-independent: one realization, zero variance.
        let driver = vec![0.0; grid.n_steps() * coeffs.d];
        let (_, realized, _) = euler_with_control(coeffs, grid, &driver, control)?;
        return Ok(EstimateWithError::exact(0.5 * realized.norm_sq()));
    }
    let shifts = realized_shifts(coeffs, grid, control, n_paths, stream)?;
    let energies: Vec<f64> = shifts.iter().map(|(u, _)| 0.5 * u.norm_sq()).collect();
    EstimateWithError::from_samples(&energies)
}

/// Monte Carlo side of the entropy bound check.
#[derive(Debug, Clone)]
pub struct EntropyBoundReport {
    /// Plug-in estimate of the relative entropy: mean of
    /// `-log rho(-delta u)` realizations.
    pub kl: EstimateWithError,
    /// Half mean Cameron-Martin energy.
    pub energy: EstimateWithError,
    /// `kl <= energy + 3 * combined standard error`.
    pub holds: bool,
    /// Exactness marker: false here, true for the tree-based variant.
    pub exact: bool,
}

/// Exact entropy bound on the enumerable oracle: relative entropy of the
/// tilted kernels against the kinetic energy of the tilt. Strict inequality
/// at any finite step size; the gap vanishes at rate dt for deterministic
/// drifts.
pub fn entropy_upper_bound_on_tree(
    tree: &crate::tree::TreePathMeasure,
    drift: &crate::tree::TreeDrift,
) -> Result<EntropyBoundReport> {
    let masses = crate::tree::pushforward_measure(tree, drift)?;
    let kl = crate::tree::exact_relative_entropy(tree, &masses)?;
    let energy = crate::tree::tilt_kinetic_energy(tree, drift)?;
    Ok(EntropyBoundReport {
        kl: EstimateWithError::exact(kl),
        energy: EstimateWithError::exact(energy),
        holds: kl <= energy,
        exact: true,
    })
}

pub fn entropy_upper_bound_check(
    control: &dyn Control,
    coeffs: &CoefficientField,
    grid: TimeGrid,
    n_paths: usize,
    stream: RandomStream,
) -> Result<EntropyBoundReport> {
    let shifts = realized_shifts(coeffs, grid, control, n_paths, stream)?;
    let mut kl_vals = Vec::with_capacity(shifts.len());
    let mut energy_vals = Vec::with_capacity(shifts.len());
    for (u, driver) in &shifts {
        let half_energy = 0.5 * u.norm_sq();
        // -log rho(-delta u) = sum <u_dot, dbeta> + |u|^2_H / 2.
        let log_rho = log_wick(&u.scaled(-1.0), driver)?;
        kl_vals.push(-log_rho);
        energy_vals.push(half_energy);
    }
    let kl = EstimateWithError::from_samples(&kl_vals)?;
    let energy = EstimateWithError::from_samples(&energy_vals)?;
    let holds = kl.value <= energy.value + 3.0 * kl.combined_std_error(&energy);
    Ok(EntropyBoundReport {
        kl,
        energy,
        holds,
        exact: false,
    })
}
