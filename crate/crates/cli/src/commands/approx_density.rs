//! `diffvar approx-density`: run the retarded-shift density approximation
//! over a parameter schedule on the enumerable tree, report per-point
//! diagnostics, and exercise the inversion round trips.

use diffvar_core::error::{Error, Result};
use diffvar_core::grid::TimeGrid;
use diffvar_core::pipeline::{
    apply_retarded_shift, build_control, fit_retarded_control, invert_retarded_shift,
    invert_retarded_tree, shifted_tree_driver, ApproximationParams,
};
use diffvar_core::stats::mean;
use diffvar_core::stream::{brownian_increments, RandomStream};
use diffvar_core::tree::{gibbs_measure, TreePathMeasure};

use crate::config::RawConfig;
use crate::csv::{CsvSink, Status};
use crate::presets;

fn parse_schedule(spec: &str, grid: TimeGrid) -> Result<Vec<ApproximationParams>> {
    let mut points = Vec::new();
    for part in spec.split(';') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let fields: Vec<&str> = part.split(',').map(|s| s.trim()).collect();
        if fields.len() != 4 {
            return Err(Error::invalid(format!(
                "schedule point {part:?}: expected n0,a,n,eta"
            )));
        }
        let params = ApproximationParams {
            n0: fields[0]
                .parse()
                .map_err(|_| Error::invalid(format!("bad n0 {:?}", fields[0])))?,
            a: fields[1]
                .parse()
                .map_err(|_| Error::invalid(format!("bad a {:?}", fields[1])))?,
            n: fields[2]
                .parse()
                .map_err(|_| Error::invalid(format!("bad n {:?}", fields[2])))?,
            eta: fields[3]
                .parse()
                .map_err(|_| Error::invalid(format!("bad eta {:?}", fields[3])))?,
        };
        params.validate(grid)?;
        points.push(params);
    }
    if points.is_empty() {
        return Err(Error::invalid("schedule has no points"));
    }
    Ok(points)
}

fn default_schedule(grid: TimeGrid) -> Vec<ApproximationParams> {
    let n = grid.n_steps();
    vec![
        ApproximationParams {
            n0: 2.0,
            a: 0.5,
            n: 2.0,
            eta: (n / 2).max(1),
        },
        ApproximationParams {
            n0: 4.0,
            a: 0.25,
            n: 4.0,
            eta: (n / 4).max(1),
        },
        ApproximationParams {
            n0: 8.0,
            a: 0.125,
            n: 8.0,
            eta: 1,
        },
    ]
}

pub fn run(config: &RawConfig) -> Result<CsvSink> {
    let reader = config.reader();
    let n_steps = reader.get_usize("n_steps", 12)?;
    let seed = reader.get_u64("seed", 1)?;
    let continuous_paths = reader.get_usize("continuous_paths", 0)?;
    let grid = TimeGrid::new(n_steps)?;
    let tree = TreePathMeasure::new(grid, 1)?;
    let f = presets::functional(&reader, 1, 1)?;
    let schedule = match reader.get_opt_str("schedule") {
        Some(spec) => parse_schedule(&spec, grid)?,
        None => default_schedule(grid),
    };
    reader.finish()?;

    let mut sink = CsvSink::new(
        "approx-density",
        config.hash("approx-density"),
        seed,
        n_steps,
        continuous_paths,
    );

    // Target density: the Gibbs measure of the functional against the walk.
    let leaves = tree.leaf_values(|p| f.eval(p, p));
    let theta0 = gibbs_measure(&tree, &leaves)?;
    let target: Vec<f64> = theta0
        .iter()
        .map(|&mass| mass * tree.n_leaves() as f64)
        .collect();

    for (i, params) in schedule.iter().enumerate() {
        let (drift, diag) = build_control(&tree, &target, *params)?;
        sink.row(&format!("l1_llogl_{i}"), diag.l1_llogl, 0.0, Status::Ok);
        sink.row(&format!("l1_logl_{i}"), diag.l1_logl, 0.0, Status::Ok);
        sink.row(
            &format!("energy_{i}"),
            diag.energy,
            0.0,
            Status::from_bool(diag.energy <= params.n),
        );
        sink.row(
            &format!("stage_truncation_{i}"),
            diag.stage_errors.truncation,
            0.0,
            Status::Ok,
        );
        sink.row(
            &format!("stage_mixing_{i}"),
            diag.stage_errors.mixing,
            0.0,
            Status::Ok,
        );
        sink.row(
            &format!("stage_capping_{i}"),
            diag.stage_errors.capping,
            0.0,
            Status::Ok,
        );
        sink.row(
            &format!("stage_delay_{i}"),
            diag.stage_errors.delay,
            0.0,
            Status::Ok,
        );

        // Inversion round trip across every enumerated path.
        let s = tree.sqrt_dt();
        let mut exact = true;
        for leaf in 0..tree.n_leaves() {
            let observed = shifted_tree_driver(&tree, &drift, -1.0, leaf);
            let recovered = invert_retarded_tree(&tree, &drift, -1.0, &observed)?;
            for (j, &inc) in recovered.iter().enumerate() {
                let expected = if tree.code_at(leaf, j) == 1 { s } else { -s };
                if inc != expected {
                    exact = false;
                }
            }
        }
        sink.row(
            &format!("tree_roundtrip_exact_{i}"),
            if exact { 1.0 } else { 0.0 },
            0.0,
            Status::from_bool(exact),
        );
    }

    if continuous_paths > 0 {
        let coeffs = diffvar_core::coeffs::presets::brownian();
        let drift = fit_retarded_control(
            &coeffs,
            f.as_ref(),
            grid,
            1,
            8.0,
            2,
            4_000,
            RandomStream::new(seed, 900_000),
        )?;
        let mut worst = 0.0f64;
        for i in 0..continuous_paths {
            let driver =
                brownian_increments(RandomStream::new(seed, 910_000 + i as u64), grid, 1)?;
            let observed = apply_retarded_shift(&coeffs, &drift, grid, -1.0, &driver)?;
            let recovered = invert_retarded_shift(&coeffs, &drift, grid, -1.0, &observed)?;
            let err = driver
                .iter()
                .zip(&recovered)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(err);
        }
        sink.row(
            "continuous_roundtrip_max_error",
            worst,
            0.0,
            Status::from_bool(worst <= 1e-12),
        );
        let _ = mean(&[0.0]);
    }

    Ok(sink)
}
