//! Exact finite path space: the scaled random walk whose increments are
//! +-sqrt(dt) per coordinate.
//!
//! Every identity the continuous machinery estimates by Monte Carlo has an
//! exactly computable analog here: free energy, the Gibbs principle, the
//! adapted-control infimum by backward induction, relative entropy of tilted
//! kernels, Doob martingales and their integrand representation. The tree is
//! a verification oracle, not an accuracy device: branching is the smallest
//! possible and the weak error O(dt) is irrelevant for identity checking.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Path, TimeGrid};
use crate::shift::CameronMartinShift;
use crate::stats::{mean, pairwise_sum};
use crate::stream::RandomStream;

/// Hard cap on `dim * n_steps`: at most 2^22 enumerated paths.
pub const ENUMERATION_GUARD: usize = 22;

/// The uniform measure on the `2^(dim * n_steps)` scaled-walk paths.
#[derive(Debug, Clone, Copy)]
pub struct TreePathMeasure {
    grid: TimeGrid,
    dim: usize,
}

impl TreePathMeasure {
    pub fn new(grid: TimeGrid, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("tree dimension must be positive"));
        }
        let depth = dim * grid.n_steps();
        if depth > ENUMERATION_GUARD {
            return Err(Error::EnumerationGuard {
                actual: depth,
                guard: ENUMERATION_GUARD,
            });
        }
        Ok(TreePathMeasure { grid, dim })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    /// Children per node: `2^dim`.
    pub fn branching(&self) -> usize {
        1 << self.dim
    }

    pub fn n_leaves(&self) -> usize {
        1 << (self.dim * self.grid.n_steps())
    }

    pub fn nodes_at(&self, level: usize) -> usize {
        1 << (self.dim * level)
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.grid.dt().sqrt()
    }

    /// Step code of `leaf` at step `j` (bit `i` set means coordinate `i`
    /// moves up).
    #[inline]
    pub fn code_at(&self, leaf: usize, j: usize) -> usize {
        let shift = self.dim * (self.grid.n_steps() - 1 - j);
        (leaf >> shift) & (self.branching() - 1)
    }

    /// Ancestor node index of `leaf` at `level`.
    #[inline]
    pub fn node_of_leaf(&self, leaf: usize, level: usize) -> usize {
        leaf >> (self.dim * (self.grid.n_steps() - level))
    }

    /// Fill `path` with the trajectory of `leaf`.
    pub fn write_leaf_path(&self, leaf: usize, path: &mut Path) {
        let s = self.sqrt_dt();
        let n = self.grid.n_steps();
        for j in 0..n {
            let code = self.code_at(leaf, j);
            for i in 0..self.dim {
                let inc = if code >> i & 1 == 1 { s } else { -s };
                let prev = path.node(j)[i];
                path.node_mut(j + 1)[i] = prev + inc;
            }
        }
    }

    /// State reached by `node` at `level` (cumulative increments).
    pub fn node_state(&self, level: usize, node: usize, out: &mut [f64]) {
        let s = self.sqrt_dt();
        out.fill(0.0);
        for j in 0..level {
            let code = (node >> (self.dim * (level - 1 - j))) & (self.branching() - 1);
            for (i, slot) in out.iter_mut().enumerate() {
                *slot += if code >> i & 1 == 1 { s } else { -s };
            }
        }
    }

    /// Evaluate a path functional on every leaf, in leaf order.
    pub fn leaf_values<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(&Path) -> f64 + Sync,
    {
        let n_leaves = self.n_leaves();
        let mut out = vec![0.0; n_leaves];
        let chunk = 1usize << (self.dim * self.grid.n_steps()).min(12);
        out.par_chunks_mut(chunk).enumerate().for_each(|(ci, slice)| {
            let mut path = Path::zero(self.grid, self.dim);
            for (off, slot) in slice.iter_mut().enumerate() {
                let leaf = ci * chunk + off;
                self.write_leaf_path(leaf, &mut path);
                *slot = f(&path);
            }
        });
        out
    }

    fn describe_leaf(&self, leaf: usize) -> String {
        let mut path = Path::zero(self.grid, self.dim);
        self.write_leaf_path(leaf, &mut path);
        format!("leaf {leaf}: {:?}", path.values())
    }
}

/// Scalar value attached to every node, stored level by level.
#[derive(Debug, Clone)]
pub struct NodeScalar {
    pub levels: Vec<Vec<f64>>,
}

impl NodeScalar {
    pub fn value(&self, level: usize, node: usize) -> f64 {
        self.levels[level][node]
    }
}

/// `R^dim` value attached to every node (stride `dim` per level).
#[derive(Debug, Clone)]
pub struct NodeVector {
    pub dim: usize,
    pub levels: Vec<Vec<f64>>,
}

impl NodeVector {
    pub fn zeros(tree: &TreePathMeasure, n_levels: usize) -> Self {
        NodeVector {
            dim: tree.dim(),
            levels: (0..n_levels)
                .map(|k| vec![0.0; tree.nodes_at(k) * tree.dim()])
                .collect(),
        }
    }

    pub fn row(&self, level: usize, node: usize) -> &[f64] {
        &self.levels[level][node * self.dim..(node + 1) * self.dim]
    }
}

/// A per-node change of increment drift.
#[derive(Debug, Clone, Copy)]
pub enum TreeDrift<'a> {
    /// Density read off a deterministic shift (same value for all nodes of
    /// a level).
    Deterministic(&'a CameronMartinShift),
    /// Node-indexed drift, levels `0..n_steps`.
    PerNode(&'a NodeVector),
}

impl TreeDrift<'_> {
    fn write_row(&self, level: usize, node: usize, out: &mut [f64]) {
        match self {
            TreeDrift::Deterministic(u) => out.copy_from_slice(u.density_at(level)),
            TreeDrift::PerNode(v) => out.copy_from_slice(v.row(level, node)),
        }
    }

    fn dim(&self) -> usize {
        match self {
            TreeDrift::Deterministic(u) => u.dim(),
            TreeDrift::PerNode(v) => v.dim,
        }
    }
}

/// `-log E[e^{-f}]` by exhaustive enumeration with log-sum-exp.
pub fn exact_free_energy_from_leaves(tree: &TreePathMeasure, leaves: &[f64]) -> Result<f64> {
    if leaves.len() != tree.n_leaves() {
        return Err(Error::DimensionMismatch {
            context: "leaf values",
            expected: tree.n_leaves(),
            actual: leaves.len(),
        });
    }
    if let Some(bad) = leaves.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "functional is not finite on {}",
            tree.describe_leaf(bad)
        )));
    }
    let shift = leaves.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = leaves.iter().map(|v| (-v - shift).exp()).collect();
    let total = pairwise_sum(&w) / tree.n_leaves() as f64;
    Ok(-(shift + total.ln()))
}

pub fn exact_free_energy<F>(tree: &TreePathMeasure, f: F) -> Result<f64>
where
    F: Fn(&Path) -> f64 + Sync,
{
    let leaves = tree.leaf_values(f);
    exact_free_energy_from_leaves(tree, &leaves)
}

/// The Gibbs measure `e^{-f} / E[e^{-f}]` as leaf probabilities.
pub fn gibbs_measure(tree: &TreePathMeasure, leaves: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = leaves.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "functional is not finite on {}",
            tree.describe_leaf(bad)
        )));
    }
    let shift = leaves.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = leaves.iter().map(|v| (-v - shift).exp()).collect();
    let total = pairwise_sum(&w);
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Relative entropy `sum q log(q / p)` against the uniform tree measure,
/// with `0 log 0 = 0`.
pub fn exact_relative_entropy(tree: &TreePathMeasure, q: &[f64]) -> Result<f64> {
    if q.len() != tree.n_leaves() {
        return Err(Error::DimensionMismatch {
            context: "measure masses",
            expected: tree.n_leaves(),
            actual: q.len(),
        });
    }
    let log_n = (tree.n_leaves() as f64).ln();
    let terms: Vec<f64> = q
        .iter()
        .map(|&m| if m > 0.0 { m * (m.ln() + log_n) } else { 0.0 })
        .collect();
    Ok(pairwise_sum(&terms))
}

/// Expectation of leaf values under a leaf measure.
pub fn measure_expectation(q: &[f64], leaves: &[f64]) -> f64 {
    let terms: Vec<f64> = q.iter().zip(leaves).map(|(m, v)| m * v).collect();
    pairwise_sum(&terms)
}

#[derive(Debug, Clone)]
pub struct GibbsReport {
    pub free_energy: f64,
    /// `E_{theta_0}[f] + H(theta_0 | p)`, computed from the realized measure.
    pub gibbs_value: f64,
    pub residual: f64,
    /// `min over random perturbations of (E_q[f] + H(q|p)) - free_energy`.
    pub min_perturbed_excess: f64,
}

/// Verify the variational characterization of the free energy: the Gibbs
/// measure attains it, and random perturbed measures sit above it.
pub fn gibbs_check(
    tree: &TreePathMeasure,
    leaves: &[f64],
    n_perturbations: usize,
    stream: RandomStream,
) -> Result<GibbsReport> {
    let free_energy = exact_free_energy_from_leaves(tree, leaves)?;
    let theta0 = gibbs_measure(tree, leaves)?;
    let value = measure_expectation(&theta0, leaves) + exact_relative_entropy(tree, &theta0)?;
    let residual = (value - free_energy).abs();

    let mut rng = stream.rng();
    let mut min_excess = f64::INFINITY;
    for _ in 0..n_perturbations {
        let mut q: Vec<f64> = theta0
            .iter()
            .map(|&m| m * rng.random_range(-0.5..0.5f64).exp())
            .collect();
        let total = pairwise_sum(&q);
        q.iter_mut().for_each(|v| *v /= total);
        let perturbed = measure_expectation(&q, leaves) + exact_relative_entropy(tree, &q)?;
        min_excess = min_excess.min(perturbed - free_energy);
    }
    Ok(GibbsReport {
        free_energy,
        gibbs_value: value,
        residual,
        min_perturbed_excess: min_excess,
    })
}

/// Backward induction for the adapted-control form: `V_N = f`,
/// `V_k = -log E[e^{-V_{k+1}} | node]`. Returns the root value and the
/// optimal transition kernel at every node (stride = branching).
pub fn dp_adapted_infimum(
    tree: &TreePathMeasure,
    leaves: &[f64],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if leaves.len() != tree.n_leaves() {
        return Err(Error::DimensionMismatch {
            context: "leaf values",
            expected: tree.n_leaves(),
            actual: leaves.len(),
        });
    }
    if let Some(bad) = leaves.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "functional is not finite on {}",
            tree.describe_leaf(bad)
        )));
    }
    let b = tree.branching();
    let n = tree.n_steps();
    let mut value = leaves.to_vec();
    let mut kernels: Vec<Vec<f64>> = Vec::with_capacity(n);
    for level in (0..n).rev() {
        let parents = tree.nodes_at(level);
        let mut next = vec![0.0; parents];
        let mut kernel = vec![0.0; parents * b];
        next.par_iter_mut()
            .zip(kernel.par_chunks_mut(b))
            .enumerate()
            .for_each(|(i, (v, krow))| {
                let children = &value[i * b..(i + 1) * b];
                let mx = children.iter().map(|c| -c).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for (c, child) in children.iter().enumerate() {
                    let w = (-child - mx).exp();
                    krow[c] = w;
                    s += w;
                }
                for k in krow.iter_mut() {
                    *k /= s;
                }
                *v = -(mx + (s / b as f64).ln());
            });
        kernels.push(kernel);
        value = next;
    }
    kernels.reverse();
    Ok((value[0], kernels))
}

/// Exponential tilting of the walk kernels by a drift: at each node and
/// coordinate, `P(up) = e^{u sqrt_dt} / (e^{u sqrt_dt} + e^{-u sqrt_dt})`.
/// Returns leaf masses. Tilts that saturate a kernel probability to 0 or 1
/// are rejected with the offending node.
pub fn pushforward_measure(tree: &TreePathMeasure, drift: &TreeDrift) -> Result<Vec<f64>> {
    let (masses, _) = tilted_masses_and_energy(tree, drift)?;
    Ok(masses)
}

/// Kinetic energy `1/2 E_q[|u|_H^2]` of the tilt under its own pushforward
/// measure (for deterministic drifts this equals the base-measure energy).
pub fn tilt_kinetic_energy(tree: &TreePathMeasure, drift: &TreeDrift) -> Result<f64> {
    let (_, energy) = tilted_masses_and_energy(tree, drift)?;
    Ok(energy)
}

fn tilted_masses_and_energy(
    tree: &TreePathMeasure,
    drift: &TreeDrift,
) -> Result<(Vec<f64>, f64)> {
    if drift.dim() != tree.dim() {
        return Err(Error::DimensionMismatch {
            context: "tree drift dimension",
            expected: tree.dim(),
            actual: drift.dim(),
        });
    }
    if let TreeDrift::Deterministic(u) = drift {
        if u.grid() != tree.grid() {
            return Err(Error::GridMismatch(
                tree.grid().n_steps(),
                u.grid().n_steps(),
            ));
        }
    }
    let dim = tree.dim();
    let b = tree.branching();
    let s = tree.sqrt_dt();
    let dt = tree.grid().dt();
    let mut masses = vec![1.0];
    let mut energy = 0.0;
    let mut row = vec![0.0; dim];
    for level in 0..tree.n_steps() {
        let parents = tree.nodes_at(level);
        let mut next = vec![0.0; parents * b];
        let mut level_energy = 0.0;
        for parent in 0..parents {
            drift.write_row(level, parent, &mut row);
            let mut p_up = vec![0.0; dim];
            for i in 0..dim {
                let t = row[i] * s;
                let p = 1.0 / (1.0 + (-2.0 * t).exp());
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::invalid(format!(
                        "tilt saturates a kernel probability at level {level}, node {parent}, coordinate {i}"
                    )));
                }
                p_up[i] = p;
            }
            let parent_mass = masses[parent];
            level_energy += parent_mass * row.iter().map(|v| v * v).sum::<f64>();
            for code in 0..b {
                let mut q = parent_mass;
                for (i, &p) in p_up.iter().enumerate() {
                    q *= if code >> i & 1 == 1 { p } else { 1.0 - p };
                }
                next[parent * b + code] = q;
            }
        }
        energy += 0.5 * level_energy * dt;
        masses = next;
    }
    Ok((masses, energy))
}

/// Exact conditional expectations of a normalized leaf density:
/// `M_k(node) = E[L | node]`, with `M` at the root equal to 1.
pub fn doob_martingale(tree: &TreePathMeasure, leaf_density: &[f64]) -> Result<NodeScalar> {
    if leaf_density.len() != tree.n_leaves() {
        return Err(Error::DimensionMismatch {
            context: "leaf density",
            expected: tree.n_leaves(),
            actual: leaf_density.len(),
        });
    }
    if leaf_density.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("leaf density must be finite and non-negative"));
    }
    let m = mean(leaf_density);
    if (m - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!(
            "leaf density must have mean 1, got {m}"
        )));
    }
    let b = tree.branching();
    let n = tree.n_steps();
    let mut levels = vec![Vec::new(); n + 1];
    levels[n] = leaf_density.to_vec();
    for level in (0..n).rev() {
        let parents = tree.nodes_at(level);
        let child = std::mem::take(&mut levels[level + 1]);
        let mut parent_vals = vec![0.0; parents];
        parent_vals.par_iter_mut().enumerate().for_each(|(i, v)| {
            *v = child[i * b..(i + 1) * b].iter().sum::<f64>() / b as f64;
        });
        levels[level + 1] = child;
        levels[level] = parent_vals;
    }
    Ok(NodeScalar { levels })
}

/// Solve `dM = alpha M dbeta` exactly on a scalar tree:
/// `alpha(node) = (M_up - M_node) / (M_node sqrt_dt)`. The martingale
/// property makes the down-branch equation hold automatically; that per-step
/// consistency is specific to binary branching, so trees with `dim > 1` are
/// rejected.
pub fn martingale_representation(tree: &TreePathMeasure, m: &NodeScalar) -> Result<NodeScalar> {
    if tree.dim() != 1 {
        return Err(Error::invalid(
            "exact martingale representation requires a scalar driver (dim = 1)",
        ));
    }
    let s = tree.sqrt_dt();
    let n = tree.n_steps();
    if m.levels.len() != n + 1 {
        return Err(Error::invalid("martingale has wrong number of levels"));
    }
    if m.levels.iter().flatten().any(|v| *v <= 0.0) {
        return Err(Error::invalid(
            "martingale representation requires strictly positive values",
        ));
    }
    let mut levels = Vec::with_capacity(n);
    for level in 0..n {
        let parents = &m.levels[level];
        let children = &m.levels[level + 1];
        let mut alpha = vec![0.0; parents.len()];
        for (i, a) in alpha.iter_mut().enumerate() {
            *a = (children[2 * i + 1] - parents[i]) / (parents[i] * s);
        }
        levels.push(alpha);
    }
    Ok(NodeScalar { levels })
}

/// Rebuild the martingale from its representation: `M_child = M_node (1 +
/// alpha eps sqrt_dt)`.
pub fn martingale_from_representation(
    tree: &TreePathMeasure,
    alpha: &NodeScalar,
    root: f64,
) -> NodeScalar {
    let s = tree.sqrt_dt();
    let n = tree.n_steps();
    let mut levels = vec![vec![root]];
    for level in 0..n {
        let parents = &levels[level];
        let a = &alpha.levels[level];
        let mut child = vec![0.0; parents.len() * 2];
        for i in 0..parents.len() {
            child[2 * i] = parents[i] * (1.0 - a[i] * s);
            child[2 * i + 1] = parents[i] * (1.0 + a[i] * s);
        }
        levels.push(child);
    }
    NodeScalar { levels }
}

/// `sum_nodes p_node |alpha(node)|^2 dt`, the discrete integrand energy of a
/// representation.
pub fn representation_energy(tree: &TreePathMeasure, alpha: &NodeScalar) -> f64 {
    let dt = tree.grid().dt();
    let mut total = 0.0;
    for (level, vals) in alpha.levels.iter().enumerate() {
        let p = 1.0 / tree.nodes_at(level) as f64;
        let terms: Vec<f64> = vals.iter().map(|a| a * a).collect();
        total += p * pairwise_sum(&terms) * dt;
    }
    total
}

/// An adapted map of increments: rewrites the step-`k` code as a function of
/// the prefix. Non-injective maps model shifts that glue driver paths.
pub trait IncrementMap: Sync {
    fn map_code(&self, level: usize, node: usize, code: usize) -> usize;
}

/// Pushforward of the uniform measure by an adapted increment map (mass
/// collection on output leaves).
pub fn pushforward_by_map(tree: &TreePathMeasure, map: &dyn IncrementMap) -> Vec<f64> {
    let n = tree.n_steps();
    let b = tree.branching();
    let p = 1.0 / tree.n_leaves() as f64;
    let mut out = vec![0.0; tree.n_leaves()];
    for leaf in 0..tree.n_leaves() {
        let mut in_node = 0usize;
        let mut out_leaf = 0usize;
        for j in 0..n {
            let code = tree.code_at(leaf, j);
            let mapped = map.map_code(j, in_node, code);
            debug_assert!(mapped < b);
            out_leaf = out_leaf * b + mapped;
            in_node = in_node * b + code;
        }
        out[out_leaf] += p;
    }
    out
}

/// `1/2 E_p |T(w) - w|_H^2` for an increment map: each flipped coordinate
/// contributes `(2 sqrt_dt / dt)^2 dt = 4` to the path energy.
pub fn map_shift_energy(tree: &TreePathMeasure, map: &dyn IncrementMap) -> f64 {
    let n = tree.n_steps();
    let b = tree.branching();
    let mut energies = vec![0.0; tree.n_leaves()];
    for (leaf, slot) in energies.iter_mut().enumerate() {
        let mut in_node = 0usize;
        let mut flips = 0usize;
        for j in 0..n {
            let code = tree.code_at(leaf, j);
            let mapped = map.map_code(j, in_node, code);
            flips += (mapped ^ code).count_ones() as usize;
            in_node = in_node * b + code;
        }
        *slot = 4.0 * flips as f64;
    }
    0.5 * mean(&energies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shift::Adaptedness;

    fn tree(n_steps: usize, dim: usize) -> TreePathMeasure {
        TreePathMeasure::new(TimeGrid::new(n_steps).unwrap(), dim).unwrap()
    }

    fn terminal(path: &Path) -> f64 {
        path.terminal()[0]
    }

    #[test]
    fn guard_rejects_deep_trees() {
        let grid = TimeGrid::new(12).unwrap();
        assert!(TreePathMeasure::new(grid, 2).is_err());
        assert!(TreePathMeasure::new(grid, 1).is_ok());
    }

    #[test]
    fn per_step_increments_have_exact_moments() {
        let t = tree(3, 2);
        let dt = t.grid().dt();
        let leaves = t.n_leaves() as f64;
        // Mean and covariance of the step-1 increment over all paths.
        let mut mean_acc = [0.0; 2];
        let mut cov = [0.0; 4];
        let mut path = Path::zero(t.grid(), 2);
        for leaf in 0..t.n_leaves() {
            t.write_leaf_path(leaf, &mut path);
            let inc: Vec<f64> = (0..2).map(|i| path.node(2)[i] - path.node(1)[i]).collect();
            for i in 0..2 {
                mean_acc[i] += inc[i] / leaves;
                for j in 0..2 {
                    cov[i * 2 + j] += inc[i] * inc[j] / leaves;
                }
            }
        }
        assert!(mean_acc.iter().all(|v| v.abs() < 1e-15));
        assert!((cov[0] - dt).abs() < 1e-15);
        assert!((cov[3] - dt).abs() < 1e-15);
        assert!(cov[1].abs() < 1e-15 && cov[2].abs() < 1e-15);
    }

    #[test]
    fn constant_functional_has_itself_as_free_energy() {
        let t = tree(4, 1);
        let fe = exact_free_energy(&t, |_| 2.75).unwrap();
        assert!((fe - 2.75).abs() < 1e-14);
    }

    #[test]
    fn one_step_terminal_free_energy_is_minus_log_cosh() {
        // Two paths, f = w(1) = +-1 on the unit grid: -log cosh(1).
        let t = tree(1, 1);
        let fe = exact_free_energy(&t, terminal).unwrap();
        let expected = -(1.0f64.cosh().ln());
        assert!((fe - expected).abs() < 1e-14);
        assert!((expected + 0.433_780_830_483_027_1).abs() < 1e-12);
    }

    #[test]
    fn one_step_squared_terminal_is_constant() {
        let t = tree(1, 1);
        let fe = exact_free_energy(&t, |p: &Path| terminal(p) * terminal(p)).unwrap();
        assert!((fe - 1.0).abs() < 1e-14);
    }

    #[test]
    fn non_finite_functional_identifies_the_leaf() {
        let t = tree(2, 1);
        let err = exact_free_energy(&t, |p: &Path| {
            if terminal(p) > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        assert!(err.to_string().contains("leaf"));
    }

    #[test]
    fn gibbs_identity_holds_and_perturbations_sit_above() {
        let t = tree(6, 2);
        let leaves = t.leaf_values(|p| {
            p.terminal()[0] + 0.3 * p.terminal()[1].powi(2) + 0.1 * p.node(3)[0]
        });
        let report = gibbs_check(&t, &leaves, 100, RandomStream::new(21, 0)).unwrap();
        assert!(report.residual <= 1e-12, "residual {}", report.residual);
        assert!(
            report.min_perturbed_excess >= -1e-12,
            "perturbed value dipped below the free energy: {}",
            report.min_perturbed_excess
        );
    }

    #[test]
    fn gibbs_zero_functional_gives_uniform_measure() {
        let t = tree(3, 1);
        let leaves = t.leaf_values(|_| 0.0);
        let report = gibbs_check(&t, &leaves, 10, RandomStream::new(22, 0)).unwrap();
        assert_eq!(report.free_energy, 0.0);
        assert!(report.residual <= 1e-14);
        let theta0 = gibbs_measure(&t, &leaves).unwrap();
        assert!(theta0.iter().all(|&m| (m - 0.125).abs() < 1e-15));
    }

    #[test]
    fn one_step_gibbs_up_mass() {
        let t = tree(1, 1);
        let leaves = t.leaf_values(terminal);
        let theta0 = gibbs_measure(&t, &leaves).unwrap();
        // Leaf order: code 0 = down, code 1 = up.
        let expected_up = (-1.0f64).exp() / (1.0f64.exp() + (-1.0f64).exp());
        assert!((theta0[1] - expected_up).abs() < 1e-14);
        assert!((theta0[1] - 0.119_202_922_022_117_5).abs() < 1e-9);
    }

    #[test]
    fn dp_matches_enumeration_and_recovers_kernels() {
        let t = tree(1, 1);
        let leaves = t.leaf_values(terminal);
        let (value, kernels) = dp_adapted_infimum(&t, &leaves).unwrap();
        assert!((value - -(1.0f64.cosh().ln())).abs() < 1e-14);
        let expected_up = (-1.0f64).exp() / (1.0f64.exp() + (-1.0f64).exp());
        assert!((kernels[0][1] - expected_up).abs() < 1e-14);

        let t2 = tree(2, 1);
        let leaves2 = t2.leaf_values(|p| terminal(p) * terminal(p));
        let (v2, _) = dp_adapted_infimum(&t2, &leaves2).unwrap();
        let fe2 = exact_free_energy_from_leaves(&t2, &leaves2).unwrap();
        assert!((v2 - fe2).abs() < 1e-12);
    }

    #[test]
    fn constant_functional_leaves_kernels_uniform() {
        let t = tree(3, 2);
        let leaves = t.leaf_values(|_| 1.5);
        let (value, kernels) = dp_adapted_infimum(&t, &leaves).unwrap();
        assert!((value - 1.5).abs() < 1e-13);
        let b = t.branching() as f64;
        for level in &kernels {
            assert!(level.iter().all(|&q| (q - 1.0 / b).abs() < 1e-14));
        }
    }

    #[test]
    fn zero_drift_pushforward_is_uniform() {
        let t = tree(3, 1);
        let u = CameronMartinShift::zero(t.grid(), 1);
        let masses = pushforward_measure(&t, &TreeDrift::Deterministic(&u)).unwrap();
        let p = 1.0 / t.n_leaves() as f64;
        assert!(masses.iter().all(|&m| (m - p).abs() < 1e-16));
        assert!((pairwise_sum(&masses) - 1.0).abs() < 1e-14);
        assert!(exact_relative_entropy(&t, &masses).unwrap().abs() < 1e-14);
    }

    #[test]
    fn constant_tilt_matches_one_step_closed_form() {
        let t = tree(1, 1);
        let a = 0.8;
        let u = CameronMartinShift::from_fn(t.grid(), 1, |_| vec![a]).unwrap();
        let masses = pushforward_measure(&t, &TreeDrift::Deterministic(&u)).unwrap();
        let s = t.sqrt_dt();
        let expected_up = (a * s).exp() / ((a * s).exp() + (-a * s).exp());
        assert!((masses[1] - expected_up).abs() < 1e-15);
        assert!((masses[0] - (1.0 - expected_up)).abs() < 1e-15);
    }

    #[test]
    fn tilted_measures_have_unit_mass_and_positive_entropy() {
        let t = tree(4, 2);
        let u = CameronMartinShift::from_fn(t.grid(), 2, |time| vec![1.0 - time, -0.5]).unwrap();
        let masses = pushforward_measure(&t, &TreeDrift::Deterministic(&u)).unwrap();
        assert!((pairwise_sum(&masses) - 1.0).abs() < 1e-14);
        let kl = exact_relative_entropy(&t, &masses).unwrap();
        assert!(kl > 0.0);
        let energy = tilt_kinetic_energy(&t, &TreeDrift::Deterministic(&u)).unwrap();
        assert!(kl <= energy);
    }

    #[test]
    fn deterministic_tilt_entropy_gap_vanishes_at_rate_dt() {
        // KL(q||p) = energy - O(dt): doubling the steps must halve the gap
        // (up to the next-order term).
        let mut gaps = Vec::new();
        for n in [4usize, 8, 16] {
            let t = tree(n, 1);
            let u = CameronMartinShift::from_fn(t.grid(), 1, |_| vec![1.0]).unwrap();
            let drift = TreeDrift::Deterministic(&u);
            let kl = exact_relative_entropy(&t, &pushforward_measure(&t, &drift).unwrap()).unwrap();
            let energy = tilt_kinetic_energy(&t, &drift).unwrap();
            assert!(kl <= energy);
            gaps.push(energy - kl);
        }
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2]);
        let r1 = gaps[0] / gaps[1];
        let r2 = gaps[1] / gaps[2];
        assert!((r1 - 2.0).abs() < 0.25, "gap ratio {r1}");
        assert!((r2 - 2.0).abs() < 0.25, "gap ratio {r2}");
    }

    #[test]
    fn point_mass_entropy_is_log_leaf_count() {
        let t = tree(3, 1);
        let mut q = vec![0.0; t.n_leaves()];
        q[5] = 1.0;
        let kl = exact_relative_entropy(&t, &q).unwrap();
        assert!((kl - (8.0f64).ln()) .abs() < 1e-14);
    }

    #[test]
    fn doob_martingale_of_constant_density_is_one() {
        let t = tree(4, 1);
        let m = doob_martingale(&t, &[1.0].repeat(t.n_leaves())).unwrap();
        assert!(m.levels.iter().flatten().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn doob_martingale_root_and_tower_property() {
        let t = tree(5, 1);
        let leaves = t.leaf_values(|p| (-(terminal(p))).exp());
        let total = mean(&leaves);
        let density: Vec<f64> = leaves.iter().map(|v| v / total).collect();
        let m = doob_martingale(&t, &density).unwrap();
        assert!((m.value(0, 0) - 1.0).abs() < 1e-12);
        for level in 0..5 {
            for node in 0..t.nodes_at(level) {
                let avg = (m.value(level + 1, 2 * node) + m.value(level + 1, 2 * node + 1)) / 2.0;
                assert!((avg - m.value(level, node)).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn unnormalized_density_is_rejected() {
        let t = tree(2, 1);
        assert!(doob_martingale(&t, &[1.5].repeat(t.n_leaves())).is_err());
    }

    #[test]
    fn one_step_representation_matches_hand_value() {
        // dt = 1, M(up) = 1.5, M(down) = 0.5: alpha = 0.5.
        let t = tree(1, 1);
        let m = doob_martingale(&t, &[0.5, 1.5]).unwrap();
        let alpha = martingale_representation(&t, &m).unwrap();
        assert!((alpha.value(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn representation_round_trips_and_respects_energy_bound() {
        let t = tree(6, 1);
        let leaves = t.leaf_values(|p| (-0.9 * terminal(p)).exp());
        let total = mean(&leaves);
        let density: Vec<f64> = leaves.iter().map(|v| v / total).collect();
        let m = doob_martingale(&t, &density).unwrap();
        let alpha = martingale_representation(&t, &m).unwrap();
        let rebuilt = martingale_from_representation(&t, &alpha, m.value(0, 0));
        for level in 0..=6 {
            for node in 0..t.nodes_at(level) {
                let a = m.value(level, node);
                let b = rebuilt.value(level, node);
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
        let d = density.iter().cloned().fold(f64::INFINITY, f64::min);
        let big_d = density.iter().cloned().fold(0.0f64, f64::max);
        let bound = 2.0 * (big_d * big_d + 1.0) / (d * d);
        assert!(representation_energy(&t, &alpha) <= bound);
    }

    #[test]
    fn trivial_martingale_has_zero_representation() {
        let t = tree(4, 1);
        let m = doob_martingale(&t, &[1.0].repeat(t.n_leaves())).unwrap();
        let alpha = martingale_representation(&t, &m).unwrap();
        assert!(alpha.levels.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn multidimensional_representation_is_rejected() {
        let t = tree(2, 2);
        let m = doob_martingale(&t, &[1.0].repeat(t.n_leaves())).unwrap();
        assert!(martingale_representation(&t, &m).is_err());
    }

    /// Forces one step's increment up: two driver paths glue to one output.
    struct ForceUp {
        level: usize,
    }

    impl IncrementMap for ForceUp {
        fn map_code(&self, level: usize, _node: usize, code: usize) -> usize {
            if level == self.level {
                1
            } else {
                code
            }
        }
    }

    #[test]
    fn non_injective_map_has_entropy_strictly_below_energy() {
        let t = tree(3, 1);
        let map = ForceUp { level: 1 };
        let q = pushforward_by_map(&t, &map);
        assert!((pairwise_sum(&q) - 1.0).abs() < 1e-14);
        let kl = exact_relative_entropy(&t, &q).unwrap();
        let energy = map_shift_energy(&t, &map);
        // Gluing one binary step costs exactly log 2 of entropy against a
        // kinetic energy of 1.
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-14);
        assert!((energy - 1.0).abs() < 1e-14);
        assert!(energy - kl > 0.3);
    }

    #[test]
    fn identity_map_is_entropy_free() {
        struct Identity;
        impl IncrementMap for Identity {
            fn map_code(&self, _level: usize, _node: usize, code: usize) -> usize {
                code
            }
        }
        let t = tree(3, 1);
        let q = pushforward_by_map(&t, &Identity);
        assert!(exact_relative_entropy(&t, &q).unwrap().abs() < 1e-14);
        assert_eq!(map_shift_energy(&t, &Identity), 0.0);
    }

    #[test]
    fn per_node_drift_tilts_like_its_deterministic_restriction() {
        // A node-indexed drift that happens to be constant must agree with
        // the deterministic route.
        let t = tree(3, 1);
        let mut v = NodeVector::zeros(&t, 3);
        for level in 0..3 {
            for val in v.levels[level].iter_mut() {
                *val = -0.6;
            }
        }
        let u = CameronMartinShift::new(
            t.grid(),
            1,
            vec![-0.6; 3],
            Adaptedness::Deterministic,
        )
        .unwrap();
        let a = pushforward_measure(&t, &TreeDrift::PerNode(&v)).unwrap();
        let b = pushforward_measure(&t, &TreeDrift::Deterministic(&u)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-16);
        }
    }
}
