//! `diffvar oracle`: exact identities on the enumerable path space — the
//! Gibbs variational principle and the adapted-control infimum.

use diffvar_core::error::Result;
use diffvar_core::grid::{Path, TimeGrid};
use diffvar_core::stream::RandomStream;
use diffvar_core::tree::{
    dp_adapted_infimum, exact_free_energy_from_leaves, gibbs_check, TreePathMeasure,
};

use crate::config::RawConfig;
use crate::csv::{CsvSink, Status};
use crate::presets;

const DP_TOLERANCE: f64 = 1e-10;
const GIBBS_TOLERANCE: f64 = 1e-12;

/// Bounded random path functionals for batch checking.
fn random_functional(seed: u64, index: u64) -> impl Fn(&Path) -> f64 + Sync {
    use rand::Rng;
    let mut rng = RandomStream::new(seed, index).rng();
    let w_term: f64 = rng.random_range(-1.5..1.5);
    let w_sq: f64 = rng.random_range(-0.8..0.8);
    let w_run: f64 = rng.random_range(-1.0..1.0);
    let w_max: f64 = rng.random_range(-0.7..0.7);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    move |p: &Path| {
        let term = p.terminal()[0];
        let dt = p.grid().dt();
        let run: f64 = (0..p.grid().n_steps())
            .map(|k| p.node(k).iter().map(|v| v * v).sum::<f64>() * dt)
            .sum();
        let maxi = (0..=p.grid().n_steps())
            .map(|k| p.node(k)[0])
            .fold(f64::NEG_INFINITY, f64::max);
        w_term * term + w_sq * term * term + w_run * run + w_max * maxi + (term + phase).sin()
    }
}

pub fn run(config: &RawConfig) -> Result<CsvSink> {
    let reader = config.reader();
    let n_steps = reader.get_usize("n_steps", 12)?;
    let dim = reader.get_usize("dim", 1)?;
    let seed = reader.get_u64("seed", 1)?;
    let n_random = reader.get_usize("random_functionals", 0)?;
    let n_perturbations = reader.get_usize("perturbations", 100)?;
    let grid = TimeGrid::new(n_steps)?;
    let tree = TreePathMeasure::new(grid, dim)?;
    let f = presets::functional(&reader, dim, dim)?;
    reader.finish()?;

    let mut sink = CsvSink::new("oracle", config.hash("oracle"), seed, n_steps, 0);

    // Functionals on the tree read the walk itself through both slots.
    let leaves = tree.leaf_values(|p| f.eval(p, p));
    let fe = exact_free_energy_from_leaves(&tree, &leaves)?;
    let (dp_value, _) = dp_adapted_infimum(&tree, &leaves)?;
    let gibbs = gibbs_check(&tree, &leaves, n_perturbations, RandomStream::new(seed, 1))?;
    sink.row("free_energy", fe, 0.0, Status::Ok);
    sink.row("dp_value", dp_value, 0.0, Status::Ok);
    sink.row(
        "dp_residual",
        (dp_value - fe).abs(),
        0.0,
        Status::from_bool((dp_value - fe).abs() <= DP_TOLERANCE),
    );
    sink.row(
        "gibbs_residual",
        gibbs.residual,
        0.0,
        Status::from_bool(gibbs.residual <= GIBBS_TOLERANCE),
    );
    sink.row(
        "gibbs_min_perturbed_excess",
        gibbs.min_perturbed_excess,
        0.0,
        Status::from_bool(gibbs.min_perturbed_excess >= -GIBBS_TOLERANCE),
    );

    if n_random > 0 {
        let mut max_dp = 0.0f64;
        let mut max_gibbs = 0.0f64;
        let mut min_excess = f64::INFINITY;
        for i in 0..n_random {
            let rf = random_functional(seed.wrapping_add(100), i as u64);
            let leaves = tree.leaf_values(rf);
            let fe = exact_free_energy_from_leaves(&tree, &leaves)?;
            let (dp, _) = dp_adapted_infimum(&tree, &leaves)?;
            max_dp = max_dp.max((dp - fe).abs());
            let g = gibbs_check(&tree, &leaves, 10, RandomStream::new(seed, 2 + i as u64))?;
            max_gibbs = max_gibbs.max(g.residual);
            min_excess = min_excess.min(g.min_perturbed_excess);
        }
        sink.row(
            "random_dp_max_residual",
            max_dp,
            0.0,
            Status::from_bool(max_dp <= DP_TOLERANCE),
        );
        sink.row(
            "random_gibbs_max_residual",
            max_gibbs,
            0.0,
            Status::from_bool(max_gibbs <= GIBBS_TOLERANCE),
        );
        sink.row(
            "random_gibbs_min_excess",
            min_excess,
            0.0,
            Status::from_bool(min_excess >= -GIBBS_TOLERANCE),
        );
    }
    Ok(sink)
}
