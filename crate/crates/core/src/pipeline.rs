//! Density approximation by invertible retarded shifts.
//!
//! Given a target density L on path space, the pipeline truncates and mixes
//! it into a two-sided-bounded density, takes its Doob martingale, extracts
//! the integrand of the martingale representation, stops it at an energy
//! cap, and delays it by a whole number of grid steps. The delayed drift
//! generates a shift whose pushforward density approximates L, and the
//! delay makes the shifted system invertible block by block: on the first
//! `delay` steps the shift vanishes, so the driver is observed directly,
//! and every later step only needs drift values computable from already
//! recovered history.
//!
//! On the tree every stage is exact. The continuous-path variant estimates
//! conditional expectations by per-level least squares on a polynomial
//! state basis and is approximate by nature; it is exposed for experiments
//! and for exercising the inversion on real trajectories.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::coeffs::CoefficientField;
use crate::error::{Error, Result};
use crate::functional::PathFunctional;
use crate::grid::{Path, TimeGrid};
use crate::sde::{euler_maruyama, Control};
use crate::shift::Adaptedness;
use crate::stats::mean;
use crate::stream::{brownian_increments, RandomStream};
use crate::tree::{
    doob_martingale, martingale_representation, NodeScalar, TreePathMeasure,
};

/// Knobs of the approximation: truncation height, mixing weight, energy
/// cap, and retardation in grid steps.
#[derive(Debug, Clone, Copy)]
pub struct ApproximationParams {
    pub n0: f64,
    pub a: f64,
    pub n: f64,
    pub eta: usize,
}

impl ApproximationParams {
    pub fn validate(&self, grid: TimeGrid) -> Result<()> {
        if self.n0.is_nan() || self.n0 < 1.0 {
            return Err(Error::invalid("truncation height n0 must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.a) {
            return Err(Error::invalid("mixing weight a must lie in [0, 1]"));
        }
        if self.n.is_nan() || self.n < 1.0 {
            return Err(Error::invalid("energy cap n must be >= 1"));
        }
        if self.eta < 1 || self.eta > grid.n_steps() {
            return Err(Error::invalid(format!(
                "retardation eta = {} must lie in 1..={}",
                self.eta,
                grid.n_steps()
            )));
        }
        Ok(())
    }
}

/// L1 distances of the produced density against the target, per stage.
#[derive(Debug, Clone, Copy)]
pub struct StageErrors {
    /// `|| L_n0 log L_n0 - L log L ||_1`
    pub truncation: f64,
    /// `|| mixed log mixed - L_n0 log L_n0 ||_1`
    pub mixing: f64,
    /// `|| M_cap(1) log M_cap(1) - mixed log mixed ||_1`
    pub capping: f64,
    /// `|| N(1) log N(1) - M_cap(1) log M_cap(1) ||_1`
    pub delay: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineDiagnostics {
    /// `|| N(1) log N(1) - L log L ||_1`
    pub l1_llogl: f64,
    /// `|| N(1) log L - L log L ||_1`
    pub l1_logl: f64,
    /// Largest per-path `|gamma|_H^2`; the cap guarantees `energy <= n`.
    pub energy: f64,
    pub stage_errors: StageErrors,
}

/// Node-indexed retarded drift on a scalar tree. The value at level `k`
/// only depends on the ancestor at level `k - delay`, which is what makes
/// the shifted system invertible.
#[derive(Debug, Clone)]
pub struct RetardedNodeDrift {
    pub delay: usize,
    pub gamma: NodeScalar,
}

/// Step 1a: `min(L, n0) / E[min(L, n0)]`. Output has mean exactly one.
pub fn truncate_normalize(
    tree: &TreePathMeasure,
    target: &[f64],
    n0: f64,
) -> Result<Vec<f64>> {
    if target.len() != tree.n_leaves() {
        return Err(Error::DimensionMismatch {
            context: "target density",
            expected: tree.n_leaves(),
            actual: target.len(),
        });
    }
    let truncated: Vec<f64> = target.iter().map(|&v| v.min(n0)).collect();
    let norm = mean(&truncated);
    if norm <= 0.0 {
        return Err(Error::invalid("truncated density has zero mass"));
    }
    Ok(truncated.into_iter().map(|v| v / norm).collect())
}

/// Step 1b: `(L + a) / (1 + a)`, pushing the density into
/// `[a / (1 + a), (max + a) / (1 + a)]` while keeping mean one.
pub fn mix(density: &[f64], a: f64) -> Vec<f64> {
    density.iter().map(|&v| (v + a) / (1.0 + a)).collect()
}

fn xlogx(v: f64) -> f64 {
    if v > 0.0 {
        v * v.ln()
    } else {
        0.0
    }
}

fn l1_distance(tree: &TreePathMeasure, a: &[f64], b: &[f64]) -> f64 {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    crate::stats::pairwise_sum(&diffs) / tree.n_leaves() as f64
}

/// Steps 2-4 on the tree: Doob martingale of the bounded density, exact
/// integrand, energy cap, and retardation. Returns the drift and the
/// diagnostics of the density it induces.
pub fn build_control(
    tree: &TreePathMeasure,
    target: &[f64],
    params: ApproximationParams,
) -> Result<(RetardedNodeDrift, PipelineDiagnostics)> {
    params.validate(tree.grid())?;
    if tree.dim() != 1 {
        return Err(Error::invalid(
            "the density pipeline runs on scalar trees (dim = 1)",
        ));
    }
    if target.iter().any(|&v| !v.is_finite() || v <= 0.0) {
        return Err(Error::invalid(
            "target density must be strictly positive and finite",
        ));
    }
    let n_steps = tree.n_steps();
    let dt = tree.grid().dt();
    let s = tree.sqrt_dt();

    let truncated = truncate_normalize(tree, target, params.n0)?;
    let mixed = mix(&truncated, params.a);

    let m = doob_martingale(tree, &mixed)?;
    let alpha = martingale_representation(tree, &m)?;

    // Energy cap: keep alpha on a prefix while the cumulative energy of the
    // *uncapped* integrand stays <= n; ties at exactly n are kept. The kept
    // energy along any path is then <= n with no rounding slack.
    let mut capped = Vec::with_capacity(n_steps);
    let mut cum = vec![0.0f64]; // cumulative energy entering each node
    for level in 0..n_steps {
        let a_level = &alpha.levels[level];
        let mut kept = vec![0.0; a_level.len()];
        let mut next_cum = vec![0.0; a_level.len() * 2];
        for (i, &a_val) in a_level.iter().enumerate() {
            let after = cum[i] + a_val * a_val * dt;
            if after <= params.n {
                kept[i] = a_val;
            }
            next_cum[2 * i] = after;
            next_cum[2 * i + 1] = after;
        }
        capped.push(kept);
        cum = next_cum;
    }
    let alpha_capped = NodeScalar { levels: capped };

    // Retard by eta whole steps: gamma at level k is the capped integrand of
    // the ancestor at level k - eta; zero on the first eta steps.
    let mut gamma_levels = Vec::with_capacity(n_steps);
    for level in 0..n_steps {
        if level < params.eta {
            gamma_levels.push(vec![0.0; tree.nodes_at(level)]);
        } else {
            let source = &alpha_capped.levels[level - params.eta];
            let shift_bits = params.eta; // dim = 1
            let mut vals = vec![0.0; tree.nodes_at(level)];
            for (node, v) in vals.iter_mut().enumerate() {
                *v = source[node >> shift_bits];
            }
            gamma_levels.push(vals);
        }
    }
    let gamma = NodeScalar {
        levels: gamma_levels,
    };

    // Terminal densities induced by the capped and the retarded integrands:
    // additive products along each path, exact mean-one martingales.
    let n_leaves = tree.n_leaves();
    let mut m_cap = vec![1.0; n_leaves];
    let mut n_eta = vec![1.0; n_leaves];
    let mut gamma_energy = vec![0.0; n_leaves];
    for leaf in 0..n_leaves {
        let mut prod_cap = 1.0;
        let mut prod_eta = 1.0;
        let mut energy = 0.0;
        for j in 0..n_steps {
            let node = tree.node_of_leaf(leaf, j);
            let eps = if tree.code_at(leaf, j) == 1 { s } else { -s };
            prod_cap *= 1.0 + alpha_capped.levels[j][node] * eps;
            let g = gamma.levels[j][node];
            prod_eta *= 1.0 + g * eps;
            energy += g * g * dt;
        }
        m_cap[leaf] = prod_cap;
        n_eta[leaf] = prod_eta;
        gamma_energy[leaf] = energy;
    }

    let max_energy = gamma_energy.iter().cloned().fold(0.0, f64::max);
    debug_assert!(max_energy <= params.n + 1e-12);

    let t_llogl: Vec<f64> = target.iter().map(|&v| xlogx(v)).collect();
    let trunc_llogl: Vec<f64> = truncated.iter().map(|&v| xlogx(v)).collect();
    let mixed_llogl: Vec<f64> = mixed.iter().map(|&v| xlogx(v)).collect();
    let cap_llogl: Vec<f64> = m_cap.iter().map(|&v| xlogx(v)).collect();
    let eta_llogl: Vec<f64> = n_eta.iter().map(|&v| xlogx(v)).collect();
    let eta_logl: Vec<f64> = n_eta
        .iter()
        .zip(target)
        .map(|(&nv, &lv)| nv * lv.ln())
        .collect();
    let l_logl: Vec<f64> = target.iter().map(|&v| v * v.ln()).collect();

    let diagnostics = PipelineDiagnostics {
        l1_llogl: l1_distance(tree, &eta_llogl, &t_llogl),
        l1_logl: l1_distance(tree, &eta_logl, &l_logl),
        energy: max_energy,
        stage_errors: StageErrors {
            truncation: l1_distance(tree, &trunc_llogl, &t_llogl),
            mixing: l1_distance(tree, &mixed_llogl, &trunc_llogl),
            capping: l1_distance(tree, &cap_llogl, &mixed_llogl),
            delay: l1_distance(tree, &eta_llogl, &cap_llogl),
        },
    };

    Ok((
        RetardedNodeDrift {
            delay: params.eta,
            gamma,
        },
        diagnostics,
    ))
}

/// Terminal density induced by a retarded drift (additive product along each
/// leaf). Mean is exactly one: each factor is a kernel-mean-one step.
pub fn induced_density(tree: &TreePathMeasure, drift: &RetardedNodeDrift) -> Vec<f64> {
    let s = tree.sqrt_dt();
    let n_steps = tree.n_steps();
    (0..tree.n_leaves())
        .map(|leaf| {
            let mut prod = 1.0;
            for j in 0..n_steps {
                let node = tree.node_of_leaf(leaf, j);
                let eps = if tree.code_at(leaf, j) == 1 { s } else { -s };
                prod *= 1.0 + drift.gamma.levels[j][node] * eps;
            }
            prod
        })
        .collect()
}

/// Driver observed through the shifted system: increments
/// `eps_k sqrt_dt + sign * gamma_k dt` along the given leaf. The invertible
/// object uses `sign = -1`; the sign is always the caller's explicit choice.
pub fn shifted_tree_driver(
    tree: &TreePathMeasure,
    drift: &RetardedNodeDrift,
    sign: f64,
    leaf: usize,
) -> Vec<f64> {
    let s = tree.sqrt_dt();
    let dt = tree.grid().dt();
    let n_steps = tree.n_steps();
    let mut out = vec![0.0; n_steps];
    for (j, slot) in out.iter_mut().enumerate() {
        let node = tree.node_of_leaf(leaf, j);
        let eps = if tree.code_at(leaf, j) == 1 { s } else { -s };
        *slot = eps + sign * drift.gamma.levels[j][node] * dt;
    }
    out
}

/// Recover the underlying walk increments from an observed shifted driver.
/// Works block by block: the first `delay` steps carry no shift, and every
/// later drift value only reads already recovered history.
pub fn invert_retarded_tree(
    tree: &TreePathMeasure,
    drift: &RetardedNodeDrift,
    sign: f64,
    observed: &[f64],
) -> Result<Vec<f64>> {
    if drift.delay == 0 {
        return Err(Error::invalid(
            "retarded inversion requires a delay of at least one grid step",
        ));
    }
    let n_steps = tree.n_steps();
    if observed.len() != n_steps {
        return Err(Error::DimensionMismatch {
            context: "observed driver",
            expected: n_steps,
            actual: observed.len(),
        });
    }
    let dt = tree.grid().dt();
    let s = tree.sqrt_dt();
    let mut node = 0usize;
    let mut recovered = vec![0.0; n_steps];
    for j in 0..n_steps {
        let g = drift.gamma.levels[j][node];
        let eps = observed[j] - sign * g * dt;
        // Walk increments are +-sqrt_dt by construction; recovering the
        // branch and snapping removes the subtraction round-off.
        let code = if eps > 0.0 { 1 } else { 0 };
        recovered[j] = if code == 1 { s } else { -s };
        node = node * 2 + code;
    }
    Ok(recovered)
}

/// Per-level polynomial-in-state approximation of the retarded drift on
/// continuous paths. Conditional expectations have no generic exact
/// continuous implementation; this is least squares, and labeled so.
#[derive(Debug, Clone)]
pub struct RetardedStateDrift {
    pub delay: usize,
    grid: TimeGrid,
    /// Numerator polynomial per level: estimate of `E[L dB_k | state] / dt`.
    num_coeffs: Vec<Vec<f64>>,
    /// Denominator polynomial per level: estimate of `E[L | state]`.
    den_coeffs: Vec<Vec<f64>>,
    den_floor: f64,
    energy_cap: f64,
}

fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for &c in coeffs.iter().rev() {
        acc = acc * x + c;
    }
    acc
}

impl RetardedStateDrift {
    /// Uncapped integrand estimate at one level.
    fn alpha_at(&self, level: usize, x: f64) -> f64 {
        let den = poly_eval(&self.den_coeffs[level], x).max(self.den_floor);
        poly_eval(&self.num_coeffs[level], x) / den
    }

    /// Drift at step `k` as a function of the state trajectory prefix:
    /// the capped integrand evaluated `delay` steps back.
    pub fn gamma_at(&self, k: usize, x_nodes: &[f64]) -> f64 {
        if k < self.delay {
            return 0.0;
        }
        let dt = self.grid.dt();
        let mut cum = 0.0;
        let mut kept = 0.0;
        for (j, &x) in x_nodes.iter().enumerate().take(k - self.delay + 1) {
            let a = self.alpha_at(j, x);
            cum += a * a * dt;
            kept = if cum <= self.energy_cap { a } else { 0.0 };
        }
        kept
    }
}

impl Control for RetardedStateDrift {
    fn dim(&self) -> usize {
        1
    }

    fn adaptedness(&self) -> Adaptedness {
        Adaptedness::PathFunctional { delay: self.delay }
    }

    fn density_at(
        &self,
        k: usize,
        _t: f64,
        x_prefix: &[f64],
        _driver_prefix: &[f64],
        out: &mut [f64],
    ) -> bool {
        out[0] = self.gamma_at(k, x_prefix);
        false
    }
}

/// Fit the retarded drift for the Gibbs density of `f` on continuous paths
/// by per-level least squares of degree `degree` in the state.
#[allow(clippy::too_many_arguments)]
pub fn fit_retarded_control(
    coeffs: &CoefficientField,
    f: &dyn PathFunctional,
    grid: TimeGrid,
    delay: usize,
    energy_cap: f64,
    degree: usize,
    n_paths: usize,
    stream: RandomStream,
) -> Result<RetardedStateDrift> {
    if coeffs.m != 1 || coeffs.d != 1 {
        return Err(Error::invalid(
            "the continuous pipeline is implemented for scalar systems",
        ));
    }
    if delay == 0 || delay > grid.n_steps() {
        return Err(Error::invalid("delay must lie in 1..=n_steps"));
    }
    if degree == 0 || degree > 6 {
        return Err(Error::invalid("feature degree must lie in 1..=6"));
    }
    if n_paths < 10 * (degree + 1) {
        return Err(Error::invalid("too few paths for the regression"));
    }
    let n = grid.n_steps();
    let sims: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let driver = brownian_increments(stream.offset(i as u64), grid, 1)?;
            let x = euler_maruyama(coeffs, grid, &driver, None)?;
            let beta = Path::from_increments(grid, 1, &driver)?;
            let fx = f.eval(&x, &beta);
            Ok((x.values().to_vec(), driver, fx))
        })
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = sims.iter().map(|(_, _, fx)| (-fx).exp()).collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::numerical("Gibbs weights overflowed"));
    }
    let norm = mean(&weights);
    if norm <= 0.0 {
        return Err(Error::numerical("Gibbs weights underflowed to zero"));
    }
    let density: Vec<f64> = weights.iter().map(|w| w / norm).collect();

    let p = degree + 1;
    let mut num_coeffs = Vec::with_capacity(n);
    let mut den_coeffs = Vec::with_capacity(n);
    let dt = grid.dt();
    for level in 0..n {
        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut rhs_den = DVector::<f64>::zeros(p);
        let mut rhs_num = DVector::<f64>::zeros(p);
        for (i, (xs, driver, _)) in sims.iter().enumerate() {
            let x = xs[level];
            let mut phi = vec![1.0; p];
            for j in 1..p {
                phi[j] = phi[j - 1] * x;
            }
            for r in 0..p {
                for c in 0..p {
                    gram[(r, c)] += phi[r] * phi[c];
                }
                rhs_den[r] += phi[r] * density[i];
                rhs_num[r] += phi[r] * density[i] * driver[level] / dt;
            }
        }
        // Tiny ridge keeps the normal equations solvable when states cluster.
        for j in 0..p {
            gram[(j, j)] += 1e-9 * (1.0 + gram[(j, j)]);
        }
        let chol = nalgebra::linalg::Cholesky::new(gram)
            .ok_or_else(|| Error::numerical("regression normal equations not SPD"))?;
        den_coeffs.push(chol.solve(&rhs_den).iter().cloned().collect::<Vec<f64>>());
        num_coeffs.push(chol.solve(&rhs_num).iter().cloned().collect::<Vec<f64>>());
    }
    Ok(RetardedStateDrift {
        delay,
        grid,
        num_coeffs,
        den_coeffs,
        den_floor: 0.05,
        energy_cap,
    })
}

/// Apply the shift generated by a retarded state drift to one driver path:
/// returns the observed driver `beta + sign * integral(gamma)`, evaluating
/// the drift along the input trajectory.
pub fn apply_retarded_shift(
    coeffs: &CoefficientField,
    drift: &RetardedStateDrift,
    grid: TimeGrid,
    sign: f64,
    driver: &[f64],
) -> Result<Vec<f64>> {
    if coeffs.m != 1 || coeffs.d != 1 {
        return Err(Error::invalid("scalar systems only"));
    }
    let x = euler_maruyama(coeffs, grid, driver, None)?;
    let dt = grid.dt();
    let mut out = vec![0.0; grid.n_steps()];
    for k in 0..grid.n_steps() {
        let g = drift.gamma_at(k, x.values());
        out[k] = driver[k] + sign * g * dt;
    }
    Ok(out)
}

/// Invert the shifted system: rebuild the driver (and with it the state)
/// step by step from the observed increments.
pub fn invert_retarded_shift(
    coeffs: &CoefficientField,
    drift: &RetardedStateDrift,
    grid: TimeGrid,
    sign: f64,
    observed: &[f64],
) -> Result<Vec<f64>> {
    if drift.delay == 0 {
        return Err(Error::invalid(
            "retarded inversion requires a delay of at least one grid step",
        ));
    }
    if observed.len() != grid.n_steps() {
        return Err(Error::DimensionMismatch {
            context: "observed driver",
            expected: grid.n_steps(),
            actual: observed.len(),
        });
    }
    let dt = grid.dt();
    let n = grid.n_steps();
    // State reconstructed along the recovered driver, one node ahead.
    let mut x_nodes = vec![0.0; n + 1];
    x_nodes[0] = coeffs.initial_point[0];
    let mut recovered = vec![0.0; n];
    let mut sigma = [0.0];
    let mut b = [0.0];
    for k in 0..n {
        // gamma at step k only reads x_nodes[..= k - delay], already rebuilt.
        let g = drift.gamma_at(k, &x_nodes);
        let inc = observed[k] - sign * g * dt;
        recovered[k] = inc;
        coeffs.sigma_into(&[x_nodes[k]], &mut sigma);
        coeffs.b_into(&[x_nodes[k]], &mut b);
        x_nodes[k + 1] = x_nodes[k] + sigma[0] * inc + b[0] * dt;
    }
    Ok(recovered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::presets;
    use crate::functional::TerminalLinear;
    use crate::stats::pairwise_sum;
    use crate::tree::gibbs_measure;

    fn tree(n_steps: usize) -> TreePathMeasure {
        TreePathMeasure::new(TimeGrid::new(n_steps).unwrap(), 1).unwrap()
    }

    fn gibbs_density(t: &TreePathMeasure, lambda: f64) -> Vec<f64> {
        let leaves = t.leaf_values(|p| lambda * p.terminal()[0]);
        let theta0 = gibbs_measure(t, &leaves).unwrap();
        // Convert leaf probabilities to a density against the uniform measure.
        theta0
            .iter()
            .map(|&m| m * t.n_leaves() as f64)
            .collect()
    }

    #[test]
    fn truncation_below_the_bound_is_identity() {
        let t = tree(3);
        let density = vec![1.0; t.n_leaves()];
        let out = truncate_normalize(&t, &density, 2.0).unwrap();
        assert_eq!(out, density);
    }

    #[test]
    fn two_path_truncation_hand_values() {
        let t = tree(1);
        // L = (1.8, 0.2) -> phi = (1, 0.2), mean 0.6, output (5/3, 1/3).
        let out = truncate_normalize(&t, &[1.8, 0.2], 1.0).unwrap();
        assert!((out[0] - 5.0 / 3.0).abs() < 1e-15);
        assert!((out[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((mean(&out) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn truncated_output_is_bounded_by_height_over_mass() {
        let t = tree(4);
        let density = gibbs_density(&t, 1.3);
        let n0 = 1.5;
        let out = truncate_normalize(&t, &density, n0).unwrap();
        let cap = n0 / mean(&density.iter().map(|&v| v.min(n0)).collect::<Vec<_>>());
        assert!(out.iter().all(|&v| v <= cap + 1e-14));
        assert!((mean(&out) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn truncation_error_vanishes_and_respects_the_envelope() {
        let t = tree(8);
        let density = gibbs_density(&t, 1.3);
        let xlogx = |v: f64| if v > 0.0 { v * v.ln() } else { 0.0 };
        let alpha = 0.5;
        let mut prev = f64::INFINITY;
        for n0 in [1.5, 2.0, 4.0, 8.0, 16.0, 64.0] {
            let ln0 = truncate_normalize(&t, &density, n0).unwrap();
            let diffs: Vec<f64> = ln0
                .iter()
                .zip(&density)
                .map(|(&a, &b)| (xlogx(a) - xlogx(b)).abs())
                .collect();
            let err = mean(&diffs);
            assert!(err <= prev + 1e-15, "truncation error not decreasing");
            prev = err;
            // Two-sided envelope once the truncated mass clears alpha.
            let mass = mean(&density.iter().map(|&v| v.min(n0)).collect::<Vec<_>>());
            if mass >= alpha {
                for (&v, &l) in ln0.iter().zip(&density) {
                    let bound = (-1.0f64).exp() + xlogx(l / alpha).abs();
                    assert!(
                        xlogx(v).abs() <= bound + 1e-12,
                        "envelope violated: |x log x| = {} vs {bound}",
                        xlogx(v).abs()
                    );
                }
            }
        }
        // The density is bounded, so a high enough cut is exact.
        assert!(prev <= 1e-12, "residual truncation error {prev}");
    }

    #[test]
    fn mixing_hand_values_and_bounds() {
        let input = vec![5.0 / 3.0, 1.0 / 3.0];
        let out = mix(&input, 0.5);
        assert!((out[0] - 13.0 / 9.0).abs() < 1e-15);
        assert!((out[1] - 5.0 / 9.0).abs() < 1e-15);
        // Lower bound a/(1+a) = 1/3, upper (5/3 + 1/2)/(3/2) = 13/9.
        assert!(out.iter().all(|&v| v >= 1.0 / 3.0 - 1e-15));
        assert!(out.iter().all(|&v| v <= 13.0 / 9.0 + 1e-15));
        assert_eq!(mix(&input, 0.0), input);
        let half = mix(&input, 1.0);
        assert!((half[0] - (5.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_target_builds_the_zero_control() {
        let t = tree(5);
        let params = ApproximationParams {
            n0: 4.0,
            a: 0.25,
            n: 4.0,
            eta: 1,
        };
        let (drift, diag) = build_control(&t, &vec![1.0; t.n_leaves()], params).unwrap();
        assert!(drift.gamma.levels.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(diag.l1_llogl, 0.0);
        assert_eq!(diag.l1_logl, 0.0);
        assert_eq!(diag.energy, 0.0);
    }

    #[test]
    fn full_delay_kills_the_control() {
        let t = tree(5);
        let density = gibbs_density(&t, 0.8);
        let params = ApproximationParams {
            n0: 8.0,
            a: 0.125,
            n: 8.0,
            eta: 5,
        };
        let (drift, diag) = build_control(&t, &density, params).unwrap();
        assert!(drift.gamma.levels.iter().flatten().all(|&v| v == 0.0));
        // With N == 1 the distance reduces to E|L log L|.
        let expected = mean(
            &density
                .iter()
                .map(|&v| (v * v.ln()).abs())
                .collect::<Vec<_>>(),
        );
        assert!((diag.l1_llogl - expected).abs() < 1e-12);
    }

    #[test]
    fn induced_density_has_mean_exactly_one() {
        let t = tree(6);
        let density = gibbs_density(&t, 1.0);
        let params = ApproximationParams {
            n0: 6.0,
            a: 0.2,
            n: 3.0,
            eta: 2,
        };
        let (drift, _) = build_control(&t, &density, params).unwrap();
        let induced = induced_density(&t, &drift);
        assert!((mean(&induced) - 1.0).abs() < 1e-13);
        assert!(induced.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn energy_cap_is_respected_exactly() {
        let t = tree(6);
        let density = gibbs_density(&t, 2.2);
        let params = ApproximationParams {
            n0: 16.0,
            a: 0.05,
            n: 1.0,
            eta: 1,
        };
        let (drift, diag) = build_control(&t, &density, params).unwrap();
        assert!(diag.energy <= params.n);
        // Recompute per-leaf energies from the drift directly.
        let dt = t.grid().dt();
        for leaf in 0..t.n_leaves() {
            let mut e = 0.0;
            for j in 0..t.n_steps() {
                let g = drift.gamma.levels[j][t.node_of_leaf(leaf, j)];
                e += g * g * dt;
            }
            assert!(e <= params.n + 0.0, "leaf {leaf} has energy {e}");
        }
    }

    #[test]
    fn refining_the_schedule_improves_the_density() {
        let t = tree(8);
        let density = gibbs_density(&t, 1.0);
        let coarse = ApproximationParams {
            n0: 2.0,
            a: 0.5,
            n: 2.0,
            eta: 4,
        };
        let mid = ApproximationParams {
            n0: 4.0,
            a: 0.25,
            n: 4.0,
            eta: 2,
        };
        let fine = ApproximationParams {
            n0: 8.0,
            a: 0.125,
            n: 8.0,
            eta: 1,
        };
        let (_, d_coarse) = build_control(&t, &density, coarse).unwrap();
        let (_, d_mid) = build_control(&t, &density, mid).unwrap();
        let (_, d_fine) = build_control(&t, &density, fine).unwrap();
        assert!(d_mid.l1_llogl <= d_coarse.l1_llogl + 1e-12);
        assert!(d_fine.l1_llogl <= d_mid.l1_llogl + 1e-12);
        assert!(d_mid.l1_logl <= d_coarse.l1_logl + 1e-12);
        assert!(d_fine.l1_logl <= d_mid.l1_logl + 1e-12);
    }

    #[test]
    fn tree_round_trip_is_exact_on_every_leaf() {
        let t = tree(6);
        let density = gibbs_density(&t, 1.4);
        let params = ApproximationParams {
            n0: 8.0,
            a: 0.125,
            n: 8.0,
            eta: 1,
        };
        let (drift, _) = build_control(&t, &density, params).unwrap();
        let s = t.sqrt_dt();
        for leaf in 0..t.n_leaves() {
            let observed = shifted_tree_driver(&t, &drift, -1.0, leaf);
            let recovered = invert_retarded_tree(&t, &drift, -1.0, &observed).unwrap();
            for (j, &inc) in recovered.iter().enumerate() {
                let expected = if t.code_at(leaf, j) == 1 { s } else { -s };
                assert_eq!(inc, expected, "leaf {leaf}, step {j}");
            }
        }
    }

    #[test]
    fn zero_delay_inversion_is_rejected() {
        let t = tree(3);
        let drift = RetardedNodeDrift {
            delay: 0,
            gamma: NodeScalar {
                levels: (0..3).map(|k| vec![0.0; 1 << k]).collect(),
            },
        };
        assert!(invert_retarded_tree(&t, &drift, -1.0, &[0.0; 3]).is_err());
    }

    #[test]
    fn deterministic_drift_inverts_by_plain_subtraction() {
        // Constant gamma: observed + integral recovers the driver.
        let t = tree(4);
        let g_levels: Vec<Vec<f64>> = (0..4).map(|k| vec![0.7; 1 << k]).collect();
        let drift = RetardedNodeDrift {
            delay: 1,
            gamma: NodeScalar { levels: g_levels },
        };
        let leaf = 0b1010;
        let observed = shifted_tree_driver(&t, &drift, -1.0, leaf);
        let dt = t.grid().dt();
        let s = t.sqrt_dt();
        for (j, &o) in observed.iter().enumerate() {
            let eps = if t.code_at(leaf, j) == 1 { s } else { -s };
            assert!((o - (eps - 0.7 * dt)).abs() < 1e-15);
        }
        let rec = invert_retarded_tree(&t, &drift, -1.0, &observed).unwrap();
        for (j, &inc) in rec.iter().enumerate() {
            let eps = if t.code_at(leaf, j) == 1 { s } else { -s };
            assert!((inc - eps).abs() < 1e-15);
        }
    }

    #[test]
    fn continuous_round_trip_reaches_machine_precision() {
        let coeffs = presets::brownian();
        let grid = TimeGrid::new(12).unwrap();
        let f = TerminalLinear::state(1.0);
        let drift = fit_retarded_control(
            &coeffs,
            &f,
            grid,
            1,
            8.0,
            2,
            2_000,
            RandomStream::new(31, 0),
        )
        .unwrap();
        for i in 0..200 {
            let driver =
                brownian_increments(RandomStream::new(32, i), grid, 1).unwrap();
            let observed =
                apply_retarded_shift(&coeffs, &drift, grid, -1.0, &driver).unwrap();
            let recovered =
                invert_retarded_shift(&coeffs, &drift, grid, -1.0, &observed).unwrap();
            let worst = driver
                .iter()
                .zip(&recovered)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 1e-12, "path {i}: worst {worst}");
        }
    }

    #[test]
    fn fitted_drift_vanishes_before_the_delay() {
        let coeffs = presets::brownian();
        let grid = TimeGrid::new(8).unwrap();
        let drift = fit_retarded_control(
            &coeffs,
            &TerminalLinear::state(1.0),
            grid,
            3,
            4.0,
            2,
            500,
            RandomStream::new(33, 0),
        )
        .unwrap();
        let x_nodes = vec![0.3; 9];
        for k in 0..3 {
            assert_eq!(drift.gamma_at(k, &x_nodes), 0.0);
        }
        assert!(drift.gamma_at(3, &x_nodes).abs() > 0.0);
        let _ = pairwise_sum(&[0.0]);
    }
}
