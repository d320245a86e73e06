//! `diffvar verify`: the standard identity battery on a chosen preset.
//!
//! Structural identities (pseudo-inverse algebra, reconstruction round
//! trips, composition, pull-back, log-domain algebra, tree entropies) must
//! hold to near machine precision; statistical identities (change of
//! measure, unit-mean weights, driver moments) must hold within three
//! standard errors. The `inject_sign_error` key is a harness self-test: it
//! flips one sign inside the reweighting and must produce FAIL rows.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use diffvar_core::coeffs::CoefficientField;
use diffvar_core::error::Result;
use diffvar_core::functional::{Constant, PathFunctional, TerminalLinear, TerminalQuadratic};
use diffvar_core::girsanov::{
    entropy_if_invertible, entropy_upper_bound_check, log_wick, reweighted_expectation_with,
    ReweightOptions,
};
use diffvar_core::grid::{Path, TimeGrid};
use diffvar_core::pinv::{theta_eta, DEFAULT_RANK_TOLERANCE};
use diffvar_core::sde::{
    compose_check, euler_maruyama, perturbed_system, reconstruct_beta, Control,
};
use diffvar_core::shift::CameronMartinShift;
use diffvar_core::stats::{mean, pairwise_sum};
use diffvar_core::stream::{brownian_increments, RandomStream};
use diffvar_core::tree::{
    exact_relative_entropy, map_shift_energy, pushforward_by_map, pushforward_measure,
    tilt_kinetic_energy, IncrementMap, TreeDrift, TreePathMeasure,
};

use crate::config::RawConfig;
use crate::csv::{CsvSink, Status};
use crate::presets;

/// Closed-form relative entropy between the shifted and unshifted Gaussian
/// node marginals: `h^T Sigma^{-1} h / 2` with `Sigma_{ij} = min(t_i, t_j)`.
/// A matrix-solve route, independent of the density-based one it checks.
fn gaussian_kl_oracle(shift: &CameronMartinShift) -> f64 {
    let grid = shift.grid();
    let n = grid.n_steps();
    let h = shift.integral();
    let cov = DMatrix::from_fn(n, n, |i, j| grid.node(i + 1).min(grid.node(j + 1)));
    let hv = DVector::from_fn(n, |i, _| h.node(i + 1)[0]);
    let chol = nalgebra::linalg::Cholesky::new(cov).expect("node covariance is SPD");
    0.5 * hv.dot(&chol.solve(&hv))
}

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

fn beta_moment_rows(
    sink: &mut CsvSink,
    coeffs: &CoefficientField,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<()> {
    let d = coeffs.d;
    let dt = grid.dt();
    let n = grid.n_steps();
    // Reconstructed driver increments over paths at a fixed probe step.
    let probe = n / 2;
    let mut per_coord: Vec<Vec<f64>> = vec![Vec::with_capacity(n_paths); d];
    for i in 0..n_paths {
        let driver = brownian_increments(RandomStream::new(seed, 2 * i as u64), grid, d)?;
        let x = euler_maruyama(coeffs, grid, &driver, None)?;
        let noise_inc =
            brownian_increments(RandomStream::new(seed, 2 * i as u64 + 1), grid, d)?;
        let noise = Path::from_increments(grid, d, &noise_inc)?;
        let beta = reconstruct_beta(&x, &noise, coeffs)?;
        for (j, coord) in per_coord.iter_mut().enumerate() {
            coord.push(beta.node(probe + 1)[j] - beta.node(probe)[j]);
        }
    }
    let mut max_mean_sigmas = 0.0f64;
    let mut max_var_rel = 0.0f64;
    for coord in &per_coord {
        let m = mean(coord);
        let se = (dt / n_paths as f64).sqrt();
        max_mean_sigmas = max_mean_sigmas.max(m.abs() / se);
        let sq: Vec<f64> = coord.iter().map(|v| (v - m) * (v - m)).collect();
        let var = pairwise_sum(&sq) / (coord.len() - 1) as f64;
        max_var_rel = max_var_rel.max((var - dt).abs() / dt);
    }
    sink.row(
        "beta_mean_max_sigmas",
        max_mean_sigmas,
        0.0,
        Status::from_bool(max_mean_sigmas <= 3.0),
    );
    sink.row(
        "beta_var_max_rel_dev",
        max_var_rel,
        0.0,
        Status::from_bool(max_var_rel <= 0.02),
    );
    if d >= 2 {
        let m0 = mean(&per_coord[0]);
        let m1 = mean(&per_coord[1]);
        let prods: Vec<f64> = per_coord[0]
            .iter()
            .zip(&per_coord[1])
            .map(|(a, b)| (a - m0) * (b - m1))
            .collect();
        let cov = pairwise_sum(&prods) / (n_paths - 1) as f64;
        let se = dt / (n_paths as f64).sqrt();
        let sigmas = cov.abs() / se;
        sink.row(
            "beta_cross_cov_max_sigmas",
            sigmas,
            0.0,
            Status::from_bool(sigmas <= 3.0),
        );
    }
    Ok(())
}

pub fn run(config: &RawConfig) -> Result<CsvSink> {
    let reader = config.reader();
    let n_steps = reader.get_usize("n_steps", 64)?;
    let n_paths = reader.get_usize("n_paths", 100_000)?;
    let seed = reader.get_u64("seed", 1)?;
    let inject = reader.get_bool("inject_sign_error", false)?;
    let grid = TimeGrid::new(n_steps)?;
    let coeffs = presets::coefficient_field(&reader)?;
    let preset_name = reader.get_str("preset", "brownian");
    reader.finish()?;

    let mut sink = CsvSink::new("verify", config.hash("verify"), seed, n_steps, n_paths);
    let d = coeffs.d;

    // Pseudo-inverse algebra on random matrices, one fifth rank-deficient.
    {
        let mut rng = RandomStream::new(seed, 10).rng();
        let mut worst = 0.0f64;
        for trial in 0..1000 {
            let m = rng.random_range(1..=6usize);
            let dd = rng.random_range(m..=6usize);
            let mut sigma = DMatrix::from_fn(m, dd, |_, _| rng.random_range(-2.0..2.0));
            if trial % 5 == 0 && m > 1 {
                let row = sigma.row(0).into_owned();
                sigma.set_row(m - 1, &row);
            }
            let pair = theta_eta(&sigma, DEFAULT_RANK_TOLERANCE)?;
            worst = worst.max(pair.max_identity_residual(&sigma));
        }
        sink.row(
            "pinv_max_residual",
            worst,
            0.0,
            Status::from_bool(worst <= 1e-9),
        );
    }

    // Reconstruction round trip on 200 paths with an independent noise.
    {
        let mut worst = 0.0f64;
        for i in 0..200u64 {
            let driver = brownian_increments(RandomStream::new(seed, 500 + 2 * i), grid, d)?;
            let x = euler_maruyama(&coeffs, grid, &driver, None)?;
            let noise_inc =
                brownian_increments(RandomStream::new(seed, 501 + 2 * i), grid, d)?;
            let noise = Path::from_increments(grid, d, &noise_inc)?;
            let beta = reconstruct_beta(&x, &noise, &coeffs)?;
            let x2 = euler_maruyama(&coeffs, grid, &beta.increments(), None)?;
            worst = worst.max(x.max_abs_diff(&x2));
        }
        sink.row(
            "reconstruction_max_error",
            worst,
            0.0,
            Status::from_bool(worst <= 1e-12),
        );
    }

    beta_moment_rows(&mut sink, &coeffs, grid, n_paths.min(100_000), seed)?;

    // Log-domain algebra: log rho(delta v) + log rho(-delta v) = -|v|_H^2.
    {
        let mut worst = 0.0f64;
        let mut rng = RandomStream::new(seed, 20).rng();
        for i in 0..100u64 {
            let density: Vec<f64> = (0..n_steps * d)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let v = CameronMartinShift::new(
                grid,
                d,
                density,
                diffvar_core::shift::Adaptedness::Deterministic,
            )?;
            let driver = brownian_increments(RandomStream::new(seed, 700 + i), grid, d)?;
            let total =
                log_wick(&v, &driver)? + log_wick(&v.scaled(-1.0), &driver)? + v.norm_sq();
            worst = worst.max(total.abs());
        }
        sink.row(
            "wick_reflection_max_residual",
            worst,
            0.0,
            Status::from_bool(worst <= 1e-12),
        );
    }

    // Change-of-measure battery: three functionals times three shifts, with
    // unit-mean weight checks. The sign hook lives here.
    {
        let fns: Vec<(&str, Box<dyn PathFunctional + Send>)> = vec![
            ("const", Box::new(Constant(1.0))),
            ("lin", Box::new(TerminalLinear::state(1.0))),
            ("quad", Box::new(TerminalQuadratic::state(0.5))),
        ];
        let shifts: Vec<(&str, CameronMartinShift)> = vec![
            (
                "unit",
                CameronMartinShift::from_fn(grid, d, |_| vec![1.0; d])?,
            ),
            (
                "ramp",
                CameronMartinShift::from_fn(grid, d, |t| {
                    (0..d).map(|j| t - 0.5 + 0.25 * j as f64).collect()
                })?,
            ),
            (
                "wave",
                CameronMartinShift::from_fn(grid, d, |t| {
                    (0..d).map(|j| (6.0 * t + j as f64).sin()).collect()
                })?,
            ),
        ];
        let opts = ReweightOptions {
            flip_wick_sign: inject,
        };
        let mut stream_idx = 1000u64;
        for (sname, u) in &shifts {
            for (fname, f) in &fns {
                let rw = reweighted_expectation_with(
                    f.as_ref(),
                    &coeffs,
                    grid,
                    u,
                    n_paths,
                    RandomStream::new(seed, stream_idx),
                    opts,
                )?;
                stream_idx += 1;
                let combined = rw.lhs.combined_std_error(&rw.rhs);
                let diff = (rw.lhs.value - rw.rhs.value).abs();
                let pass = if fname == &"const" && sname == &"unit" && !inject {
                    // Normalization check doubles as the unit-mean test.
                    diff <= 3.0 * combined.max(rw.rhs.std_error)
                } else {
                    diff <= 3.0 * combined.max(1e-300)
                };
                sink.row(
                    &format!("girsanov_{fname}_{sname}"),
                    diff,
                    combined,
                    Status::from_bool(pass),
                );
            }
            // Unit mean of the weight alone.
            let rw = reweighted_expectation_with(
                &Constant(1.0),
                &coeffs,
                grid,
                u,
                n_paths,
                RandomStream::new(seed, stream_idx),
                opts,
            )?;
            stream_idx += 1;
            let dev = (rw.rhs.value - 1.0).abs();
            sink.row(
                &format!("wick_mean_one_{sname}"),
                dev,
                rw.rhs.std_error,
                Status::from_bool(dev <= 3.0 * rw.rhs.std_error),
            );
        }
    }

    // Composition law for deterministic shifts.
    {
        let u = CameronMartinShift::from_fn(grid, d, |t| vec![t * t - 0.3; d])?;
        let v = CameronMartinShift::from_fn(grid, d, |t| vec![(3.0 * t).sin(); d])?;
        let mut worst = 0.0f64;
        for i in 0..100u64 {
            let driver = brownian_increments(RandomStream::new(seed, 2000 + i), grid, d)?;
            let report = compose_check(&coeffs, grid, &u, &v, &driver, None)?;
            worst = worst
                .max(report.max_state_discrepancy)
                .max(report.max_driver_discrepancy);
        }
        sink.row(
            "composition_max_discrepancy",
            worst,
            0.0,
            Status::from_bool(worst <= 1e-10),
        );
    }

    // Pull-back: rebuilding the driver from the perturbed pair returns it.
    {
        let u = CameronMartinShift::from_fn(grid, d, |t| {
            (0..d).map(|j| 0.5 + t * j as f64).collect()
        })?;
        let mut worst = 0.0f64;
        for i in 0..100u64 {
            let driver = brownian_increments(RandomStream::new(seed, 3000 + i), grid, d)?;
            let sys = perturbed_system(&coeffs, grid, &driver, None, &u)?;
            let rebuilt = reconstruct_beta(&sys.x_u, &sys.beta_u, &coeffs)?;
            worst = worst.max(rebuilt.max_abs_diff(&sys.beta_u));
        }
        sink.row(
            "pullback_max_error",
            worst,
            0.0,
            Status::from_bool(worst <= 1e-12),
        );
    }

    // Entropy of a deterministic shift against the closed-form Gaussian
    // relative entropy (the state is the driver itself on this preset).
    if preset_name == "brownian" {
        let u = CameronMartinShift::from_fn(grid, 1, |t| vec![(2.0 * t).cos() - 0.4])?;
        let ent = entropy_if_invertible(&u, &coeffs, grid, 1, RandomStream::new(seed, 40))?;
        let oracle = gaussian_kl_oracle(&u);
        let diff = (ent.value - oracle).abs();
        sink.row(
            "entropy_gaussian_kl_diff",
            diff,
            0.0,
            Status::from_bool(diff <= 1e-6),
        );
    }

    // Entropy bound for a bounded retarded feedback, Monte Carlo side.
    {
        struct Retarded {
            d: usize,
        }
        impl Control for Retarded {
            fn dim(&self) -> usize {
                self.d
            }
            fn adaptedness(&self) -> diffvar_core::shift::Adaptedness {
                diffvar_core::shift::Adaptedness::PathFunctional { delay: 1 }
            }
            fn density_at(
                &self,
                k: usize,
                _t: f64,
                x: &[f64],
                _b: &[f64],
                out: &mut [f64],
            ) -> bool {
                let m = x.len() / (k + 1);
                let lagged = if k == 0 { 0.0 } else { x[(k - 1) * m] };
                out.fill((-lagged).clamp(-2.0, 2.0));
                false
            }
        }
        let report = entropy_upper_bound_check(
            &Retarded { d },
            &coeffs,
            grid,
            n_paths.min(50_000),
            RandomStream::new(seed, 50),
        )?;
        sink.row(
            "entropy_bound_mc",
            report.kl.value - report.energy.value,
            report.kl.combined_std_error(&report.energy),
            Status::from_bool(report.holds),
        );
    }

    // Exact tree checks: tilted-kernel entropy below tilt energy, and the
    // glued-path map strictly below its shift energy.
    {
        let tree_grid = TimeGrid::new(8)?;
        let tree = TreePathMeasure::new(tree_grid, 1)?;
        let u = CameronMartinShift::from_fn(tree_grid, 1, |t| vec![1.0 - t])?;
        let drift = TreeDrift::Deterministic(&u);
        let kl = exact_relative_entropy(&tree, &pushforward_measure(&tree, &drift)?)?;
        let energy = tilt_kinetic_energy(&tree, &drift)?;
        sink.row(
            "tree_tilt_entropy_gap",
            energy - kl,
            0.0,
            Status::from_bool(kl <= energy),
        );
        let map = ForceUp { level: 2 };
        let q = pushforward_by_map(&tree, &map);
        let kl_map = exact_relative_entropy(&tree, &q)?;
        let energy_map = map_shift_energy(&tree, &map);
        sink.row(
            "tree_noninjective_gap",
            energy_map - kl_map,
            0.0,
            Status::from_bool(energy_map - kl_map > 0.0),
        );
    }

    Ok(sink)
}
