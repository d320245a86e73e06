//! Deterministic accumulation and the point-estimate-with-error type.
//!
//! All reductions are pairwise over a fixed index order, so a result never
//! depends on thread count or scheduling.

use crate::error::{Error, Result};

/// Pairwise (cascade) summation. Error grows like O(log n) in ulps instead
/// of O(n), and the reduction tree is a pure function of the slice length.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BASE: usize = 64;
    if values.len() <= BASE {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// Monte Carlo point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateWithError {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl EstimateWithError {
    pub fn exact(value: f64) -> Self {
        EstimateWithError {
            value,
            std_error: 0.0,
            n_samples: 1,
        }
    }

    /// Sample mean and `sd / sqrt(n)`, both from pairwise accumulations.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::numerical("no samples to average"));
        }
        let n = samples.len();
        let m = mean(samples);
        if n == 1 {
            return Ok(EstimateWithError {
                value: m,
                std_error: 0.0,
                n_samples: 1,
            });
        }
        let sq: Vec<f64> = samples.iter().map(|v| (v - m) * (v - m)).collect();
        let var = pairwise_sum(&sq) / (n - 1) as f64;
        Ok(EstimateWithError {
            value: m,
            std_error: (var / n as f64).sqrt(),
            n_samples: n,
        })
    }

    /// Standard error of a difference of independent estimates.
    pub fn combined_std_error(&self, other: &EstimateWithError) -> f64 {
        (self.std_error * self.std_error + other.std_error * other.std_error).sqrt()
    }
}

/// Stabilized statistics of `exp(v_i)` for the free-energy estimators:
/// returns `(log mean exp(v), relative_std_error, plug_in_log_bias)`.
///
/// The plug-in bias is the O(1/n) upward bias of `-log(sample mean)`,
/// `var / (2 n mean^2)`; it is reported, not corrected.
pub fn log_mean_exp_with_error(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::numerical("no samples for log-mean-exp"));
    }
    let shift = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::numerical("non-finite exponent in log-mean-exp"));
    }
    let w: Vec<f64> = values.iter().map(|v| (v - shift).exp()).collect();
    let n = w.len();
    let mw = mean(&w);
    if mw <= 0.0 {
        return Err(Error::numerical("all log-mean-exp weights underflowed"));
    }
    let (rel_se, bias) = if n > 1 {
        let sq: Vec<f64> = w.iter().map(|v| (v - mw) * (v - mw)).collect();
        let var = pairwise_sum(&sq) / (n - 1) as f64;
        (
            (var / n as f64).sqrt() / mw,
            var / (2.0 * n as f64 * mw * mw),
        )
    } else {
        (0.0, 0.0)
    };
    Ok((shift + mw.ln(), rel_se, bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_naive_on_small_inputs() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = v.iter().sum();
        assert!((pairwise_sum(&v) - naive).abs() < 1e-9);
    }

    #[test]
    fn estimate_from_constant_samples_has_zero_error() {
        let e = EstimateWithError::from_samples(&[2.5; 100]).unwrap();
        assert_eq!(e.value, 2.5);
        assert_eq!(e.std_error, 0.0);
        assert_eq!(e.n_samples, 100);
    }

    #[test]
    fn log_mean_exp_handles_large_shifts() {
        // log mean exp([a, a]) = a even when exp(a) overflows.
        let (v, se, _) = log_mean_exp_with_error(&[800.0, 800.0]).unwrap();
        assert!((v - 800.0).abs() < 1e-12);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn log_mean_exp_two_values() {
        let (v, _, _) = log_mean_exp_with_error(&[-1.0, 1.0]).unwrap();
        let expected = ((0.5f64) * ((-1.0f64).exp() + (1.0f64).exp())).ln();
        assert!((v - expected).abs() < 1e-14);
    }
}
