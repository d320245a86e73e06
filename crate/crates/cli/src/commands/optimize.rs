//! `diffvar optimize`: minimize the control objective over a configured
//! family and report the trace, the optimum, and the gap against the
//! direct estimate.

use diffvar_core::error::{Error, Result};
use diffvar_core::grid::TimeGrid;
use diffvar_core::stream::RandomStream;
use diffvar_core::variational::{
    attainment_check_mc, optimize, ControlFamily, FamilyKind, GradMode, OptimizeOptions,
    SpsaSchedule,
};

use crate::config::{ConfigReader, RawConfig};
use crate::csv::{CsvSink, Status};
use crate::presets;

fn family_from_config(
    reader: &ConfigReader,
    grid: TimeGrid,
    m: usize,
    d: usize,
) -> Result<ControlFamily> {
    let clip = reader.get_f64("clip_bound", 8.0)?;
    let kind = match reader.get_str("family", "constant").as_str() {
        "constant" => FamilyKind::Constant,
        "piecewise" => FamilyKind::PiecewiseConstant {
            segments: reader.get_usize("segments", 4)?,
        },
        "linear_feedback" => FamilyKind::LinearFeedback,
        "rbf_feedback" => {
            let centers_spec = reader.get_str("rbf_centers", "-2,-1,0,1,2");
            let width = reader.get_f64("rbf_width", 0.75)?;
            let centers: Vec<Vec<f64>> = centers_spec
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<f64>()
                        .map(|v| vec![v; m])
                        .map_err(|_| Error::invalid(format!("bad RBF center {tok:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let widths = vec![width; centers.len()];
            FamilyKind::RbfFeedback { centers, widths }
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown family {other:?} (constant, piecewise, linear_feedback, rbf_feedback)"
            )))
        }
    };
    ControlFamily::new(kind, grid, m, d, clip)
}

pub fn run(config: &RawConfig) -> Result<CsvSink> {
    let reader = config.reader();
    let n_steps = reader.get_usize("n_steps", 64)?;
    let n_paths = reader.get_usize("n_paths", 100_000)?;
    let seed = reader.get_u64("seed", 1)?;
    let grid = TimeGrid::new(n_steps)?;
    let coeffs = presets::coefficient_field(&reader)?;
    let f = presets::functional(&reader, coeffs.m, coeffs.d)?;
    let family = family_from_config(&reader, grid, coeffs.m, coeffs.d)?;
    let grad_mode = match reader.get_str("grad_mode", "spsa").as_str() {
        "spsa" => GradMode::Spsa,
        "finite_diff" => GradMode::FiniteDiff,
        "pathwise" => GradMode::Pathwise,
        other => {
            return Err(Error::invalid(format!(
                "unknown grad_mode {other:?} (spsa, finite_diff, pathwise)"
            )))
        }
    };
    let opts = OptimizeOptions {
        max_iter: reader.get_usize("max_iter", 120)?,
        n_paths_per_iter: reader.get_usize("n_paths_per_iter", 4_000)?,
        n_paths_final: n_paths,
        grad_mode,
        spsa: SpsaSchedule {
            a: reader.get_f64("spsa_a", 0.5)?,
            c: reader.get_f64("spsa_c", 0.15)?,
            alpha: reader.get_f64("spsa_alpha", 0.602)?,
            gamma: reader.get_f64("spsa_gamma", 0.101)?,
            stability: reader.get_f64("spsa_stability", 10.0)?,
        },
        learning_rate: reader.get_f64("learning_rate", 25.0)?,
        lr_halflife: reader.get_f64("lr_halflife", 200.0)?,
        fd_step: reader.get_f64("fd_step", 1e-3)?,
        tol: reader.get_f64("tol", 0.0)?,
    };
    let run_attainment = reader.get_bool("attainment", false)?;
    let trace_every = reader.get_usize("trace_every", 10)?.max(1);
    reader.finish()?;

    let mut report = optimize(
        f.as_ref(),
        &coeffs,
        grid,
        &family,
        &opts,
        RandomStream::new(seed, 0),
    )?;
    if run_attainment {
        let best = family.clone().with_params(report.params.clone())?;
        let att = attainment_check_mc(
            f.as_ref(),
            &coeffs,
            grid,
            &best,
            n_paths,
            RandomStream::new(seed, 0).block(1_000_000),
        )?;
        report.attainment = Some(att.max_standardized_discrepancy);
    }

    let mut sink = CsvSink::new("optimize", config.hash("optimize"), seed, n_steps, n_paths);
    for (iter, j) in &report.param_trace {
        if iter % trace_every == 0 || *iter + 1 == report.param_trace.len() {
            sink.row(&format!("trace_{iter:05}"), *j, 0.0, Status::Ok);
        }
    }
    sink.row(
        "direct",
        report.direct.value,
        report.direct.std_error,
        Status::Ok,
    );
    sink.row("j_star_raw", report.j_star_raw, 0.0, Status::Ok);
    sink.row(
        "j_star",
        report.j_star.value,
        report.j_star.std_error,
        Status::Ok,
    );
    sink.row(
        "gap",
        report.gap,
        report.j_star.combined_std_error(&report.direct),
        Status::from_bool(!report.violation),
    );
    sink.row("iterations", report.iterations as f64, 0.0, Status::Ok);
    sink.row("clipped_steps", report.clipped_steps as f64, 0.0, Status::Ok);
    sink.row(
        "invertibility",
        if report.invertibility_assumed { 0.0 } else { 1.0 },
        0.0,
        if report.invertibility_assumed {
            Status::Assumed
        } else {
            Status::Pass
        },
    );

    if let Some(att) = report.attainment {
        sink.row("attainment_max_std_discrepancy", att, 0.0, Status::Ok);
    }
    Ok(sink)
}
