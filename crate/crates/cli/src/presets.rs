//! Name-to-object resolution for coefficient fields and functionals.

use diffvar_core::coeffs::{presets, CoefficientField};
use diffvar_core::error::{Error, Result};
use diffvar_core::functional::{
    Component, Constant, PathFunctional, RunningQuadratic, TerminalLinear, TerminalQuadratic,
};

use crate::config::ConfigReader;
use crate::expr::parse_expr;

/// Points sampled when spot-checking declared coefficient bounds.
const VALIDATION_POINTS: usize = 64;
const VALIDATION_RADIUS: f64 = 8.0;

pub fn coefficient_field(reader: &ConfigReader) -> Result<CoefficientField> {
    let name = reader.get_str("preset", "brownian");
    let field = match name.as_str() {
        "brownian" => presets::brownian(),
        "degenerate" => presets::degenerate_row(),
        "sinusoidal" => presets::sinusoidal(),
        "constant" => {
            let sigma0 = reader.get_f64("sigma0", 1.0)?;
            let b0 = reader.get_f64("b0", 0.0)?;
            let c0 = reader.get_f64("c0", 0.0)?;
            presets::constant_scalar(sigma0, b0, c0)?
        }
        "affine" => {
            let sigma0 = reader.get_f64("sigma0", 1.0)?;
            let slope = reader.get_f64("slope", 0.25)?;
            let radius = reader.get_f64("clip_radius", 2.0)?;
            presets::affine_clipped(sigma0, slope, radius)?
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown coefficient preset {other:?} (brownian, degenerate, sinusoidal, constant, affine)"
            )))
        }
    };
    field.validate(VALIDATION_POINTS, VALIDATION_RADIUS)?;
    Ok(field)
}

fn component(reader: &ConfigReader) -> Result<Component> {
    match reader.get_str("component", "x").as_str() {
        "x" => Ok(Component::State),
        "beta" => Ok(Component::Driver),
        other => Err(Error::invalid(format!(
            "unknown component {other:?} (x, beta)"
        ))),
    }
}

pub fn functional(
    reader: &ConfigReader,
    m: usize,
    d: usize,
) -> Result<Box<dyn PathFunctional + Send>> {
    let name = reader.get_str("functional", "terminal_quadratic");
    match name.as_str() {
        "constant" => {
            let c = reader.get_f64("constant_value", 0.0)?;
            Ok(Box::new(Constant(c)))
        }
        "terminal_linear" => {
            let lambda = reader.get_f64("lambda", 1.0)?;
            let comp = component(reader)?;
            let coord = reader.get_usize("coord", 0)?;
            let max = if comp == Component::State { m } else { d };
            if coord >= max {
                return Err(Error::invalid(format!("coord {coord} out of range 0..{max}")));
            }
            Ok(Box::new(TerminalLinear {
                lambda,
                component: comp,
                coord,
            }))
        }
        "terminal_quadratic" => {
            let lambda = reader.get_f64("lambda", 1.0)?;
            let comp = component(reader)?;
            let coord = reader.get_usize("coord", 0)?;
            let max = if comp == Component::State { m } else { d };
            if coord >= max {
                return Err(Error::invalid(format!("coord {coord} out of range 0..{max}")));
            }
            Ok(Box::new(TerminalQuadratic {
                lambda,
                component: comp,
                coord,
            }))
        }
        "running_integral" => {
            let lambda = reader.get_f64("lambda", 1.0)?;
            Ok(Box::new(RunningQuadratic { lambda }))
        }
        "expr" => {
            let src = reader
                .get_opt_str("expr")
                .ok_or_else(|| Error::invalid("functional = expr needs an expr key"))?;
            Ok(Box::new(parse_expr(&src, m, d)?))
        }
        other => Err(Error::invalid(format!(
            "unknown functional {other:?} (constant, terminal_linear, terminal_quadratic, running_integral, expr)"
        ))),
    }
}
