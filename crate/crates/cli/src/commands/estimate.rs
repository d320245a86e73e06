//! `diffvar estimate`: direct free-energy estimate of the configured
//! functional under the configured diffusion.

use diffvar_core::error::Result;
use diffvar_core::grid::TimeGrid;
use diffvar_core::stream::RandomStream;
use diffvar_core::variational::estimate_free_energy;

use crate::config::RawConfig;
use crate::csv::{CsvSink, Status};
use crate::presets;

pub fn run(config: &RawConfig) -> Result<CsvSink> {
    let reader = config.reader();
    let n_steps = reader.get_usize("n_steps", 64)?;
    let n_paths = reader.get_usize("n_paths", 100_000)?;
    let seed = reader.get_u64("seed", 1)?;
    let grid = TimeGrid::new(n_steps)?;
    let coeffs = presets::coefficient_field(&reader)?;
    let f = presets::functional(&reader, coeffs.m, coeffs.d)?;
    reader.finish()?;

    let report = estimate_free_energy(
        f.as_ref(),
        &coeffs,
        grid,
        n_paths,
        RandomStream::new(seed, 0),
    )?;

    let mut sink = CsvSink::new("estimate", config.hash("estimate"), seed, n_steps, n_paths);
    sink.row(
        "free_energy",
        report.estimate.value,
        report.estimate.std_error,
        Status::Ok,
    );
    sink.row("plug_in_bias", report.plug_in_bias, 0.0, Status::Ok);
    sink.row("rejected", report.rejected as f64, 0.0, Status::Ok);
    Ok(sink)
}
