//! Monte Carlo side of the variational representation of the free energy:
//! estimate `-log E[e^{-f}]` directly, minimize
//! `J(u) = E[f(perturbed) + |u|_H^2 / 2]` over a parametrized family of
//! adapted controls, and check the attainment characterization.
//!
//! The direct estimate is a lower bound of every `J(u)` up to Monte Carlo
//! noise, so a `J` falling significantly below it indicates a bug, never a
//! better optimum; reports carry an explicit violation flag for that case.

use rand::Rng;
use rayon::prelude::*;

use crate::coeffs::CoefficientField;
use crate::error::{Error, Result};
use crate::functional::PathFunctional;
use crate::grid::{Path, TimeGrid};
use crate::sde::{euler_with_control, Control};
use crate::shift::{Adaptedness, CameronMartinShift};
use crate::stats::{log_mean_exp_with_error, EstimateWithError};
use crate::stream::{brownian_increments, RandomStream};
use crate::tree::{
    gibbs_measure, pushforward_measure, NodeVector, TreeDrift, TreePathMeasure,
};

/// Maximum tolerated fraction of rejected samples, shared with the
/// reweighting estimators.
pub use crate::girsanov::MAX_REJECTED_FRACTION;

/// Parametric shapes for the control density.
#[derive(Debug, Clone)]
pub enum FamilyKind {
    /// One density value for the whole horizon.
    Constant,
    /// Piecewise constant in time over equal segments.
    PiecewiseConstant { segments: usize },
    /// Per-node affine feedback `A(t_k) x + c(t_k)`.
    LinearFeedback,
    /// Per-time-slice radial basis expansion in the state.
    RbfFeedback {
        centers: Vec<Vec<f64>>,
        widths: Vec<f64>,
    },
}

/// A parametrized adapted control. Feedback kinds read the current state of
/// the controlled system; deterministic kinds read time only. Densities are
/// clipped to `|u_dot| <= clip_bound`, which keeps every member of the
/// family bounded.
#[derive(Debug, Clone)]
pub struct ControlFamily {
    pub kind: FamilyKind,
    grid: TimeGrid,
    m: usize,
    d: usize,
    pub clip_bound: f64,
    pub params: Vec<f64>,
}

impl ControlFamily {
    pub fn new(
        kind: FamilyKind,
        grid: TimeGrid,
        m: usize,
        d: usize,
        clip_bound: f64,
    ) -> Result<Self> {
        if clip_bound <= 0.0 {
            return Err(Error::invalid("clip bound must be positive"));
        }
        if let FamilyKind::PiecewiseConstant { segments } = &kind {
            if *segments == 0 || *segments > grid.n_steps() {
                return Err(Error::invalid("segments must lie in 1..=n_steps"));
            }
        }
        if let FamilyKind::RbfFeedback { centers, widths } = &kind {
            if centers.is_empty() || centers.len() != widths.len() {
                return Err(Error::invalid("need one width per RBF center"));
            }
            if centers.iter().any(|c| c.len() != m) {
                return Err(Error::invalid("RBF centers must live in the state space"));
            }
            if widths.iter().any(|w| *w <= 0.0) {
                return Err(Error::invalid("RBF widths must be positive"));
            }
        }
        let n_params = Self::param_count(&kind, grid, m, d);
        Ok(ControlFamily {
            kind,
            grid,
            m,
            d,
            clip_bound,
            params: vec![0.0; n_params],
        })
    }

    pub fn param_count(kind: &FamilyKind, grid: TimeGrid, m: usize, d: usize) -> usize {
        match kind {
            FamilyKind::Constant => d,
            FamilyKind::PiecewiseConstant { segments } => segments * d,
            FamilyKind::LinearFeedback => grid.n_steps() * (d * m + d),
            FamilyKind::RbfFeedback { centers, .. } => grid.n_steps() * centers.len() * d,
        }
    }

    pub fn with_params(mut self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                context: "family parameters",
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params = params;
        self
            .params
            .iter()
            .all(|v| v.is_finite())
            .then_some(())
            .ok_or_else(|| Error::invalid("family parameters must be finite"))?;
        Ok(self)
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn is_feedback(&self) -> bool {
        matches!(
            self.kind,
            FamilyKind::LinearFeedback | FamilyKind::RbfFeedback { .. }
        )
    }

    fn segment_of(&self, k: usize, segments: usize) -> usize {
        (k * segments / self.grid.n_steps()).min(segments - 1)
    }

    /// Raw (unclipped) density into `out`.
    fn raw_density(&self, k: usize, state: &[f64], out: &mut [f64]) {
        match &self.kind {
            FamilyKind::Constant => out.copy_from_slice(&self.params),
            FamilyKind::PiecewiseConstant { segments } => {
                let s = self.segment_of(k, *segments);
                out.copy_from_slice(&self.params[s * self.d..(s + 1) * self.d]);
            }
            FamilyKind::LinearFeedback => {
                let stride = self.d * self.m + self.d;
                let block = &self.params[k * stride..(k + 1) * stride];
                for j in 0..self.d {
                    let mut acc = block[self.d * self.m + j];
                    for i in 0..self.m {
                        acc += block[j * self.m + i] * state[i];
                    }
                    out[j] = acc;
                }
            }
            FamilyKind::RbfFeedback { centers, widths } => {
                let n_c = centers.len();
                out.fill(0.0);
                for (j, (c, w)) in centers.iter().zip(widths).enumerate() {
                    let dist_sq: f64 = c
                        .iter()
                        .zip(state)
                        .map(|(ci, xi)| (xi - ci) * (xi - ci))
                        .sum();
                    let phi = (-dist_sq / (2.0 * w * w)).exp();
                    let base = k * n_c * self.d + j * self.d;
                    for (o, slot) in out.iter_mut().enumerate() {
                        *slot += self.params[base + o] * phi;
                    }
                }
            }
        }
    }

    fn clip(&self, out: &mut [f64]) -> bool {
        let norm: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.clip_bound {
            let scale = self.clip_bound / norm;
            out.iter_mut().for_each(|v| *v *= scale);
            true
        } else {
            false
        }
    }

    /// Scalar evaluation with derivative data for pathwise gradients
    /// (m = d = 1 families only): returns `(u, du/dx, clipped)` and pushes
    /// `(param index, du/dparam)` pairs.
    fn eval_scalar_with_grad(
        &self,
        k: usize,
        x: f64,
        param_grad: &mut Vec<(usize, f64)>,
    ) -> (f64, f64, bool) {
        param_grad.clear();
        let (mut u, du_dx) = match &self.kind {
            FamilyKind::Constant => {
                param_grad.push((0, 1.0));
                (self.params[0], 0.0)
            }
            FamilyKind::PiecewiseConstant { segments } => {
                let s = self.segment_of(k, *segments);
                param_grad.push((s, 1.0));
                (self.params[s], 0.0)
            }
            FamilyKind::LinearFeedback => {
                let a = self.params[2 * k];
                let c = self.params[2 * k + 1];
                param_grad.push((2 * k, x));
                param_grad.push((2 * k + 1, 1.0));
                (a * x + c, a)
            }
            FamilyKind::RbfFeedback { centers, widths } => {
                let n_c = centers.len();
                let mut u = 0.0;
                let mut du = 0.0;
                for (j, (c, w)) in centers.iter().zip(widths).enumerate() {
                    let diff = x - c[0];
                    let phi = (-diff * diff / (2.0 * w * w)).exp();
                    let idx = k * n_c + j;
                    param_grad.push((idx, phi));
                    u += self.params[idx] * phi;
                    du += self.params[idx] * phi * (-diff / (w * w));
                }
                (u, du)
            }
        };
        if u.abs() > self.clip_bound {
            u = u.signum() * self.clip_bound;
            param_grad.clear();
            return (u, 0.0, true);
        }
        (u, du_dx, false)
    }
}

impl Control for ControlFamily {
    fn dim(&self) -> usize {
        self.d
    }

    fn adaptedness(&self) -> Adaptedness {
        if self.is_feedback() {
            Adaptedness::MarkovFeedback
        } else {
            Adaptedness::Deterministic
        }
    }

    fn density_at(
        &self,
        k: usize,
        _t: f64,
        x_prefix: &[f64],
        _driver_prefix: &[f64],
        out: &mut [f64],
    ) -> bool {
        let state = &x_prefix[x_prefix.len() - self.m..];
        self.raw_density(k, state, out);
        self.clip(out)
    }
}

#[derive(Debug, Clone)]
pub struct FreeEnergyReport {
    pub estimate: EstimateWithError,
    /// O(1/n) upward bias of the plug-in logarithm (reported, not removed).
    pub plug_in_bias: f64,
    pub rejected: usize,
}

/// Direct estimate of `-log E[e^{-f}]` with log-sum-exp stabilization and a
/// delta-method standard error.
pub fn estimate_free_energy(
    f: &dyn PathFunctional,
    coeffs: &CoefficientField,
    grid: TimeGrid,
    n_paths: usize,
    stream: RandomStream,
) -> Result<FreeEnergyReport> {
    if n_paths == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    let values: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let driver = brownian_increments(stream.offset(i as u64), grid, coeffs.d)?;
            let x = crate::sde::euler_maruyama(coeffs, grid, &driver, None)?;
            let beta = Path::from_increments(grid, coeffs.d, &driver)?;
            Ok(f.eval(&x, &beta))
        })
        .collect::<Result<Vec<f64>>>()?;
    let kept: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    let rejected = values.len() - kept.len();
    if (rejected as f64) > MAX_REJECTED_FRACTION * n_paths as f64 || kept.is_empty() {
        return Err(Error::numerical(format!(
            "{rejected} of {n_paths} samples rejected as non-finite"
        )));
    }
    let negated: Vec<f64> = kept.iter().map(|v| -v).collect();
    let (log_mean, rel_se, bias) = log_mean_exp_with_error(&negated)?;
    Ok(FreeEnergyReport {
        estimate: EstimateWithError {
            value: -log_mean,
            std_error: rel_se,
            n_samples: kept.len(),
        },
        plug_in_bias: bias,
        rejected,
    })
}

#[derive(Debug, Clone)]
pub struct ObjectiveReport {
    pub estimate: EstimateWithError,
    pub rejected: usize,
    pub clipped_steps: usize,
}

/// `J(u) = E[f(X^u, beta + u) + |u|_H^2 / 2]` for one member of a family.
pub fn objective(
    f: &dyn PathFunctional,
    coeffs: &CoefficientField,
    grid: TimeGrid,
    control: &dyn Control,
    n_paths: usize,
    stream: RandomStream,
) -> Result<ObjectiveReport> {
    if n_paths == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    let d = coeffs.d;
    let samples: Vec<Result<(f64, usize)>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let driver = brownian_increments(stream.offset(i as u64), grid, d)?;
            let (x_u, realized, clipped) = euler_with_control(coeffs, grid, &driver, control)?;
            let shift_path = realized.integral();
            let mut beta_u = Path::from_increments(grid, d, &driver)?;
            for k in 0..=grid.n_steps() {
                for j in 0..d {
                    beta_u.node_mut(k)[j] += shift_path.node(k)[j];
                }
            }
            Ok((
                f.eval(&x_u, &beta_u) + 0.5 * realized.norm_sq(),
                clipped,
            ))
        })
        .collect();
    let mut vals = Vec::with_capacity(n_paths);
    let mut rejected = 0usize;
    let mut clipped_total = 0usize;
    for s in samples {
        let (v, clipped) = s?;
        clipped_total += clipped;
        if v.is_finite() {
            vals.push(v);
        } else {
            rejected += 1;
        }
    }
    if (rejected as f64) > MAX_REJECTED_FRACTION * n_paths as f64 || vals.is_empty() {
        return Err(Error::numerical(format!(
            "{rejected} of {n_paths} objective samples rejected"
        )));
    }
    Ok(ObjectiveReport {
        estimate: EstimateWithError::from_samples(&vals)?,
        rejected,
        clipped_steps: clipped_total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Simultaneous perturbation: two objective evaluations per iteration,
    /// no smoothness needed.
    Spsa,
    /// Central differences, one coordinate at a time.
    FiniteDiff,
    /// Exact per-path differentiation of the scheme; needs declared
    /// coefficient derivatives and a state-differentiable functional.
    Pathwise,
}

#[derive(Debug, Clone, Copy)]
pub struct SpsaSchedule {
    pub a: f64,
    pub c: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub stability: f64,
}

impl Default for SpsaSchedule {
    fn default() -> Self {
        SpsaSchedule {
            a: 0.5,
            c: 0.15,
            alpha: 0.602,
            gamma: 0.101,
            stability: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeOptions {
    pub max_iter: usize,
    pub n_paths_per_iter: usize,
    pub n_paths_final: usize,
    pub grad_mode: GradMode,
    pub spsa: SpsaSchedule,
    /// Base learning rate for pathwise / finite-difference descent.
    pub learning_rate: f64,
    /// Iterations after which the learning rate has halved.
    pub lr_halflife: f64,
    /// Finite-difference step.
    pub fd_step: f64,
    /// Stop when the parameter update falls below this in sup norm.
    pub tol: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            max_iter: 120,
            n_paths_per_iter: 4_000,
            n_paths_final: 100_000,
            grad_mode: GradMode::Spsa,
            spsa: SpsaSchedule::default(),
            learning_rate: 25.0,
            lr_halflife: 200.0,
            fd_step: 1e-3,
            tol: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariationalReport {
    /// Direct free-energy estimate on independent streams.
    pub direct: EstimateWithError,
    /// Best objective value seen during optimization (optimization-biased).
    pub j_star_raw: f64,
    /// Fresh-sample re-evaluation of the best parameters.
    pub j_star: EstimateWithError,
    pub gap: f64,
    pub iterations: usize,
    pub param_trace: Vec<(usize, f64)>,
    pub params: Vec<f64>,
    /// Set when the gap is significantly negative (must never happen for a
    /// correct implementation).
    pub violation: bool,
    pub clipped_steps: usize,
    /// Feedback families are not certified left-invertible; the identity is
    /// then used under an explicitly recorded assumption.
    pub invertibility_assumed: bool,
    /// Density-match statistic from an attainment check, when one was run.
    pub attainment: Option<f64>,
}

/// Per-path objective value and parameter gradient by backward
/// differentiation of the scheme (scalar systems).
fn pathwise_sample(
    f: &dyn PathFunctional,
    coeffs: &CoefficientField,
    grid: TimeGrid,
    family: &ControlFamily,
    driver: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let n = grid.n_steps();
    let dt = grid.dt();
    let mut x = Path::zero(grid, 1);
    x.node_mut(0)[0] = coeffs.initial_point[0];
    let mut u_vals = vec![0.0; n];
    let mut du_dx = vec![0.0; n];
    let mut param_grads: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    let mut sigmas = vec![0.0; n];
    let mut sigma_primes = vec![0.0; n];
    let mut b_primes = vec![0.0; n];
    let mut scratch = Vec::new();
    for k in 0..n {
        let xk = x.node(k)[0];
        let (u, du, _clipped) = family.eval_scalar_with_grad(k, xk, &mut scratch);
        let (s, sp, b, bp) = coeffs
            .scalar_with_derivatives(xk)
            .ok_or_else(|| Error::invalid("pathwise mode needs declared scalar derivatives"))?;
        u_vals[k] = u;
        du_dx[k] = du;
        param_grads.push(scratch.clone());
        sigmas[k] = s;
        sigma_primes[k] = sp;
        b_primes[k] = bp;
        x.node_mut(k + 1)[0] = xk + s * (driver[k] + u * dt) + b * dt;
    }
    let shift = CameronMartinShift::new(grid, 1, u_vals.clone(), Adaptedness::MarkovFeedback)?;
    let shift_path = shift.integral();
    let mut beta_u = Path::from_increments(grid, 1, driver)?;
    for k in 0..=n {
        beta_u.node_mut(k)[0] += shift_path.node(k)[0];
    }
    let j_val = f.eval(&x, &beta_u) + 0.5 * shift.norm_sq();
    let node_grad = f
        .state_gradient(&x, &beta_u)
        .ok_or_else(|| Error::invalid("pathwise mode needs a state-differentiable functional"))?;

    let mut grad = vec![0.0; family.params.len()];
    let mut lambda = node_grad[n];
    for k in (0..n).rev() {
        let dj_du = u_vals[k] * dt + lambda * sigmas[k] * dt;
        for &(idx, g) in &param_grads[k] {
            grad[idx] += dj_du * g;
        }
        lambda = node_grad[k]
            + lambda
                * (1.0 + sigma_primes[k] * (driver[k] + u_vals[k] * dt) + b_primes[k] * dt)
            + dj_du * du_dx[k];
    }
    Ok((j_val, grad))
}

fn batch_objective(
    f: &dyn PathFunctional,
    coeffs: &CoefficientField,
    grid: TimeGrid,
    family: &ControlFamily,
    n_paths: usize,
    stream: RandomStream,
) -> Result<f64> {
    Ok(objective(f, coeffs, grid, family, n_paths, stream)?.estimate.value)
}

/// Descend `J` over the family parameters and report the best control found
/// together with the direct estimate and their gap.
pub fn optimize(
    f: &dyn PathFunctional,
    coeffs: &CoefficientField,
    grid: TimeGrid,
    family: &ControlFamily,
    opts: &OptimizeOptions,
    stream: RandomStream,
) -> Result<VariationalReport> {
    if opts.max_iter == 0 || opts.n_paths_per_iter == 0 {
        return Err(Error::invalid("optimizer needs iterations and paths"));
    }
    if opts.grad_mode == GradMode::Pathwise {
        if coeffs.m != 1 || coeffs.d != 1 {
            return Err(Error::invalid("pathwise mode is limited to scalar systems"));
        }
        if !coeffs.has_scalar_derivatives() {
            return Err(Error::invalid(
                "pathwise mode needs declared coefficient derivatives",
            ));
        }
    }
    let mut current = family.clone();
    let mut best_params = current.params.clone();
    let mut best_j = f64::INFINITY;
    let mut trace = Vec::with_capacity(opts.max_iter + 1);
    let mut prev_j = f64::INFINITY;
    let mut rising = 0usize;
    let mut iterations = 0usize;
    let mut rng = stream.block(0).rng();
    let mut clipped_total = 0usize;
    // Candidates are compared on one fixed batch: with common random
    // numbers the comparison noise cancels across iterations, so "best
    // seen" cannot be won by a lucky gradient batch instead of a better
    // control.
    let selection_batch = stream.block(opts.max_iter as u64 + 4);

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let batch = stream.block(1 + iter as u64);
        let tracked = objective(
            f,
            coeffs,
            grid,
            &current,
            opts.n_paths_per_iter,
            selection_batch,
        )?;
        clipped_total += tracked.clipped_steps;
        let j_now = tracked.estimate.value;

        trace.push((iter, j_now));
        if j_now < best_j {
            best_j = j_now;
            best_params = current.params.clone();
        }
        if j_now > prev_j {
            rising += 1;
            if rising >= 10 {
                return Err(Error::numerical(format!(
                    "objective increased for 10 consecutive iterations; trace tail {:?}",
                    &trace[trace.len().saturating_sub(12)..]
                )));
            }
        } else {
            rising = 0;
        }
        prev_j = j_now;

        // Gradient on this iteration's fresh batch, common random numbers
        // within the iteration.
        let grad = match opts.grad_mode {
            GradMode::Pathwise => {
                let samples: Vec<Result<(f64, Vec<f64>)>> = (0..opts.n_paths_per_iter)
                    .into_par_iter()
                    .map(|i| {
                        let driver =
                            brownian_increments(batch.offset(i as u64), grid, coeffs.d)?;
                        pathwise_sample(f, coeffs, grid, &current, &driver)
                    })
                    .collect();
                let mut grad_acc = vec![0.0; current.params.len()];
                for s in samples {
                    let (_, g) = s?;
                    for (a, b) in grad_acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                let scale = 1.0 / opts.n_paths_per_iter as f64;
                grad_acc.iter_mut().for_each(|v| *v *= scale);
                grad_acc
            }
            GradMode::Spsa => {
                let ck = opts.spsa.c / ((iter + 1) as f64).powf(opts.spsa.gamma);
                let delta: Vec<f64> = (0..current.params.len())
                    .map(|_| if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 })
                    .collect();
                let mut plus = current.params.clone();
                let mut minus = current.params.clone();
                for (i, dv) in delta.iter().enumerate() {
                    plus[i] += ck * dv;
                    minus[i] -= ck * dv;
                }
                let j_plus = batch_objective(
                    f,
                    coeffs,
                    grid,
                    &current.clone().with_params(plus)?,
                    opts.n_paths_per_iter,
                    batch,
                )?;
                let j_minus = batch_objective(
                    f,
                    coeffs,
                    grid,
                    &current.clone().with_params(minus)?,
                    opts.n_paths_per_iter,
                    batch,
                )?;
                let g0 = (j_plus - j_minus) / (2.0 * ck);
                delta.iter().map(|dv| g0 / dv).collect()
            }
            GradMode::FiniteDiff => {
                let mut grad = vec![0.0; current.params.len()];
                for i in 0..current.params.len() {
                    let mut plus = current.params.clone();
                    let mut minus = current.params.clone();
                    plus[i] += opts.fd_step;
                    minus[i] -= opts.fd_step;
                    let jp = batch_objective(
                        f,
                        coeffs,
                        grid,
                        &current.clone().with_params(plus)?,
                        opts.n_paths_per_iter,
                        batch,
                    )?;
                    let jm = batch_objective(
                        f,
                        coeffs,
                        grid,
                        &current.clone().with_params(minus)?,
                        opts.n_paths_per_iter,
                        batch,
                    )?;
                    grad[i] = (jp - jm) / (2.0 * opts.fd_step);
                }
                grad
            }
        };

        let step = match opts.grad_mode {
            GradMode::Spsa => {
                opts.spsa.a / ((iter + 1) as f64 + opts.spsa.stability).powf(opts.spsa.alpha)
            }
            _ => opts.learning_rate / (1.0 + iter as f64 / opts.lr_halflife),
        };
        let mut max_update = 0.0f64;
        for (p, g) in current.params.iter_mut().zip(&grad) {
            let upd = step * g;
            max_update = max_update.max(upd.abs());
            *p -= upd;
        }
        if !current.params.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("parameters diverged to non-finite values"));
        }
        if opts.tol > 0.0 && max_update < opts.tol {
            break;
        }
    }
    // The parameters produced by the last update would otherwise never be
    // considered.
    let last = objective(
        f,
        coeffs,
        grid,
        &current,
        opts.n_paths_per_iter,
        selection_batch,
    )?;
    if last.estimate.value < best_j {
        best_j = last.estimate.value;
        best_params = current.params.clone();
        trace.push((iterations, last.estimate.value));
    }

    // Fresh-sample re-evaluation removes the winner's-curse bias of the
    // best-seen value; the direct estimate runs on its own streams.
    let best = family.clone().with_params(best_params.clone())?;
    let final_report = objective(
        f,
        coeffs,
        grid,
        &best,
        opts.n_paths_final,
        stream.block(opts.max_iter as u64 + 2),
    )?;
    let direct_report = estimate_free_energy(
        f,
        coeffs,
        grid,
        opts.n_paths_final,
        stream.block(opts.max_iter as u64 + 3),
    )?;
    let j_star = final_report.estimate;
    let direct = direct_report.estimate;
    let gap = j_star.value - direct.value;
    let violation = gap < -3.0 * j_star.combined_std_error(&direct);
    Ok(VariationalReport {
        direct,
        j_star_raw: best_j,
        j_star,
        gap,
        iterations,
        param_trace: trace,
        params: best_params,
        violation,
        clipped_steps: clipped_total + final_report.clipped_steps,
        invertibility_assumed: best.is_feedback(),
        attainment: None,
    })
}

/// Exact attainment check on the tree: total variation between the kernel
/// tilt induced by the control and the Gibbs measure of `f`.
pub fn attainment_tv_on_tree(
    tree: &TreePathMeasure,
    family: &ControlFamily,
    f_leaves: &[f64],
) -> Result<f64> {
    if family.dim() != tree.dim() {
        return Err(Error::DimensionMismatch {
            context: "control dimension",
            expected: tree.dim(),
            actual: family.dim(),
        });
    }
    let n = tree.n_steps();
    let mut drift = NodeVector::zeros(tree, n);
    let mut state = vec![0.0; tree.dim()];
    let mut row = vec![0.0; tree.dim()];
    for level in 0..n {
        for node in 0..tree.nodes_at(level) {
            tree.node_state(level, node, &mut state);
            family.raw_density(level, &state, &mut row);
            family.clip(&mut row);
            drift.levels[level][node * tree.dim()..(node + 1) * tree.dim()]
                .copy_from_slice(&row);
        }
    }
    let tilted = pushforward_measure(tree, &TreeDrift::PerNode(&drift))?;
    let theta0 = gibbs_measure(tree, f_leaves)?;
    let tv: f64 = 0.5
        * tilted
            .iter()
            .zip(&theta0)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    Ok(tv)
}

#[derive(Debug, Clone)]
pub struct AttainmentReport {
    /// Largest standardized discrepancy over the test battery.
    pub max_standardized_discrepancy: f64,
    pub n_functionals: usize,
}

/// Monte Carlo attainment check: compares `E[g(perturbed)]` against the
/// Gibbs-weighted `E[g e^{-f}] / E[e^{-f}]` for a fixed battery of test
/// functionals.
pub fn attainment_check_mc(
    f: &dyn PathFunctional,
    coeffs: &CoefficientField,
    grid: TimeGrid,
    control: &dyn Control,
    n_paths: usize,
    stream: RandomStream,
) -> Result<AttainmentReport> {
    type TestFunctional = Box<dyn Fn(&Path, &Path) -> f64 + Sync>;
    let battery: Vec<TestFunctional> = vec![
        Box::new(|x, _| x.terminal()[0]),
        Box::new(|x, _| x.terminal()[0].powi(2)),
        Box::new(|x, _| x.terminal()[0].powi(3)),
        Box::new(|x, _| x.terminal()[0].abs()),
        Box::new(|x, _| (-x.terminal()[0].powi(2)).exp()),
        Box::new(|x, _| x.terminal()[0].sin()),
        Box::new(|x, _| x.terminal()[0].cos()),
        Box::new(|_, b| b.terminal()[0]),
        Box::new(|_, b| b.terminal()[0].powi(2)),
        Box::new(|x, b| x.terminal()[0] * b.terminal()[0]),
    ];
    let d = coeffs.d;
    // Perturbed-system samples.
    let with_control: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let driver = brownian_increments(stream.offset(i as u64), grid, d)?;
            let (x_u, realized, _) = euler_with_control(coeffs, grid, &driver, control)?;
            let shift_path = realized.integral();
            let mut beta_u = Path::from_increments(grid, d, &driver)?;
            for k in 0..=grid.n_steps() {
                for j in 0..d {
                    beta_u.node_mut(k)[j] += shift_path.node(k)[j];
                }
            }
            Ok(battery.iter().map(|g| g(&x_u, &beta_u)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    // Gibbs-weighted base samples on an independent block.
    let base_stream = stream.block(7);
    let base: Vec<(Vec<f64>, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let driver = brownian_increments(base_stream.offset(i as u64), grid, d)?;
            let x = crate::sde::euler_maruyama(coeffs, grid, &driver, None)?;
            let beta = Path::from_increments(grid, d, &driver)?;
            let gs: Vec<f64> = battery.iter().map(|g| g(&x, &beta)).collect();
            Ok((gs, f.eval(&x, &beta)))
        })
        .collect::<Result<Vec<_>>>()?;

    let shift = base
        .iter()
        .map(|(_, fv)| -fv)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = base.iter().map(|(_, fv)| (-fv - shift).exp()).collect();
    let w_mean = crate::stats::mean(&weights);

    let mut max_std = 0.0f64;
    for (gi, _) in battery.iter().enumerate() {
        let lhs_samples: Vec<f64> = with_control.iter().map(|row| row[gi]).collect();
        let lhs = EstimateWithError::from_samples(&lhs_samples)?;
        // Self-normalized importance estimate with delta-method error.
        let weighted: Vec<f64> = base
            .iter()
            .zip(&weights)
            .map(|((gs, _), w)| gs[gi] * w)
            .collect();
        let ratio = crate::stats::mean(&weighted) / w_mean;
        let influence: Vec<f64> = base
            .iter()
            .zip(&weights)
            .map(|((gs, _), w)| (gs[gi] - ratio) * w / w_mean)
            .collect();
        let rhs_se = EstimateWithError::from_samples(&influence)?.std_error;
        let denom = (lhs.std_error.powi(2) + rhs_se.powi(2)).sqrt().max(1e-300);
        max_std = max_std.max((lhs.value - ratio).abs() / denom);
    }
    Ok(AttainmentReport {
        max_standardized_discrepancy: max_std,
        n_functionals: battery.len(),
    })
}
