//! The (theta, eta) pair attached to a diffusion matrix.
//!
//! For an `m x d` matrix sigma, `theta` is the `d x m` map that inverts
//! sigma on its image and vanishes on the orthogonal complement — the
//! Moore-Penrose pseudo-inverse — and `eta = I_d - theta sigma` is the
//! orthogonal projector onto `ker sigma`. Together they satisfy
//! `theta sigma + eta = I_d`, which is what lets a d-dimensional Brownian
//! motion be rebuilt from the pair (martingale part, independent noise).
//!
//! The SVD is a one-sided Jacobi iteration: the matrices here are tiny
//! (dimensions <= 6 in every preset) and Jacobi keeps full accuracy on
//! exactly rank-deficient input, where bidiagonalization-based routines can
//! lose the factorization identity itself.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative singular-value cutoff used when none is supplied.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct PseudoInversePair {
    /// `d x m`, inverse of sigma on `im sigma`, zero on `(im sigma)^perp`.
    pub theta: DMatrix<f64>,
    /// `d x d`, orthogonal projector onto `ker sigma`.
    pub eta: DMatrix<f64>,
    pub rank: usize,
}

/// Thin SVD `a = u diag(s) v^T` by one-sided Jacobi on the columns of
/// `a^T`. Returns `(u: m x r, s: r, v: d x r)` with `r = min(m, d)`,
/// singular values in non-increasing order.
pub fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (m, d) = a.shape();
    // Work on the tall factor: b (d x m) with orthogonal columns at the end.
    let tall = m <= d;
    let mut b = if tall { a.transpose() } else { a.clone() };
    let cols = b.ncols();
    let mut g = DMatrix::<f64>::identity(cols, cols);

    let eps = f64::EPSILON;
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let mut aii = 0.0;
                let mut ajj = 0.0;
                let mut aij = 0.0;
                for r in 0..b.nrows() {
                    aii += b[(r, i)] * b[(r, i)];
                    ajj += b[(r, j)] * b[(r, j)];
                    aij += b[(r, i)] * b[(r, j)];
                }
                if aij.abs() <= eps * (aii * ajj).sqrt() || aij == 0.0 {
                    continue;
                }
                off = off.max(aij.abs() / (aii * ajj).sqrt().max(f64::MIN_POSITIVE));
                let zeta = (ajj - aii) / (2.0 * aij);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for r in 0..b.nrows() {
                    let bi = b[(r, i)];
                    let bj = b[(r, j)];
                    b[(r, i)] = cs * bi - sn * bj;
                    b[(r, j)] = sn * bi + cs * bj;
                }
                for r in 0..cols {
                    let gi = g[(r, i)];
                    let gj = g[(r, j)];
                    g[(r, i)] = cs * gi - sn * gj;
                    g[(r, j)] = sn * gi + cs * gj;
                }
            }
        }
        if off <= 4.0 * eps {
            break;
        }
    }

    // Column norms are the singular values; sort them non-increasing.
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols).map(|j| b.column(j).norm()).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).expect("finite norms"));

    let mut s = Vec::with_capacity(cols);
    let mut q = DMatrix::<f64>::zeros(b.nrows(), cols);
    let mut w = DMatrix::<f64>::zeros(cols, cols);
    for (pos, &j) in order.iter().enumerate() {
        let norm = norms[j];
        s.push(norm);
        if norm > 0.0 {
            for r in 0..b.nrows() {
                q[(r, pos)] = b[(r, j)] / norm;
            }
        }
        for r in 0..cols {
            w[(r, pos)] = g[(r, j)];
        }
    }
    // tall: a^T = q s w^T, so a = w s q^T: u = w (m x r), v = q (d x r).
    if tall {
        (w, s, q)
    } else {
        (q, s, w)
    }
}

/// Build `(theta, eta)` for a single matrix. Singular values below
/// `rank_tolerance * s_max` are treated as zero; the zero matrix is valid
/// input and yields `theta = 0`, `eta = I`.
pub fn theta_eta(sigma: &DMatrix<f64>, rank_tolerance: f64) -> Result<PseudoInversePair> {
    let (m, d) = sigma.shape();
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("sigma matrix has non-finite entries"));
    }
    let (u, s, v) = jacobi_svd(sigma);
    let s_max = s.first().cloned().unwrap_or(0.0);
    let cutoff = rank_tolerance.max(0.0) * s_max;

    let mut theta = DMatrix::zeros(d, m);
    let mut rank = 0usize;
    for (i, &sv) in s.iter().enumerate() {
        if sv > cutoff && sv > 0.0 {
            rank += 1;
            for r in 0..d {
                for c in 0..m {
                    theta[(r, c)] += v[(r, i)] * u[(c, i)] / sv;
                }
            }
        }
    }
    let eta = DMatrix::identity(d, d) - &theta * sigma;
    Ok(PseudoInversePair { theta, eta, rank })
}

/// Fast path for row matrices (m = 1): theta = sigma^T / |sigma|^2, written
/// into `theta_out` (length d); the projector eta is applied on the fly by
/// callers as `eta v = v - theta (sigma v)`.
pub fn theta_row(sigma_row: &[f64], theta_out: &mut [f64]) {
    let norm_sq: f64 = sigma_row.iter().map(|v| v * v).sum();
    if norm_sq == 0.0 {
        theta_out.fill(0.0);
    } else {
        for (t, s) in theta_out.iter_mut().zip(sigma_row) {
            *t = s / norm_sq;
        }
    }
}

impl PseudoInversePair {
    /// Largest violation of the defining identities:
    /// `theta sigma + eta = I`, `sigma theta sigma = sigma`,
    /// `theta sigma theta = theta`, `sigma eta = 0`, plus projector
    /// symmetry and idempotence of eta.
    pub fn max_identity_residual(&self, sigma: &DMatrix<f64>) -> f64 {
        let d = sigma.ncols();
        let ts = &self.theta * sigma;
        let mut worst = (&ts + &self.eta - DMatrix::identity(d, d)).abs().max();
        worst = worst.max((sigma * &ts - sigma).abs().max());
        worst = worst.max((&ts * &self.theta - &self.theta).abs().max());
        worst = worst.max((sigma * &self.eta).abs().max());
        worst = worst.max((&self.eta * &self.eta - &self.eta).abs().max());
        worst = worst.max((&self.eta - self.eta.transpose()).abs().max());
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::stream::RandomStream;

    /// Independent oracle: Ben-Israel / Newton-Schulz iteration
    /// `T <- 2T - T sigma T`, started from `sigma^T / s_max^2`, converges to
    /// the Moore-Penrose pseudo-inverse without touching the SVD route.
    fn newton_schulz_pinv(sigma: &DMatrix<f64>) -> DMatrix<f64> {
        let two_norm_sq = (sigma * sigma.transpose()).abs().max() * sigma.nrows() as f64;
        if two_norm_sq == 0.0 {
            return sigma.transpose();
        }
        let mut t = sigma.transpose() / two_norm_sq;
        for _ in 0..200 {
            t = 2.0 * &t - &t * sigma * &t;
        }
        t
    }

    #[test]
    fn jacobi_factorization_reconstructs_rank_deficient_input() {
        let mut rng = RandomStream::new(17, 0).rng();
        for trial in 0..500 {
            let m = rng.random_range(1..=6usize);
            let d = rng.random_range(m..=6usize);
            let mut sigma = DMatrix::from_fn(m, d, |_, _| rng.random_range(-2.0..2.0));
            if trial % 3 == 0 && m > 1 {
                let row = sigma.row(0).into_owned();
                sigma.set_row(m - 1, &row);
            }
            let (u, s, v) = jacobi_svd(&sigma);
            let mut recon = DMatrix::zeros(m, d);
            for (i, &sv) in s.iter().enumerate() {
                for r in 0..m {
                    for c in 0..d {
                        recon[(r, c)] += sv * u[(r, i)] * v[(c, i)];
                    }
                }
            }
            let err = (&recon - &sigma).abs().max();
            assert!(err < 1e-12, "trial {trial}: reconstruction error {err}");
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn orthonormal_row_gives_transpose() {
        let sigma = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let pair = theta_eta(&sigma, DEFAULT_RANK_TOLERANCE).unwrap();
        assert_eq!(pair.rank, 1);
        assert!((pair.theta[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(pair.theta[(1, 0)].abs() < 1e-15);
        let expected_eta = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert!((pair.eta - expected_eta).abs().max() < 1e-15);
    }

    #[test]
    fn zero_matrix_gives_zero_theta_and_identity_eta() {
        let sigma = DMatrix::zeros(1, 2);
        let pair = theta_eta(&sigma, DEFAULT_RANK_TOLERANCE).unwrap();
        assert_eq!(pair.rank, 0);
        assert_eq!(pair.theta.abs().max(), 0.0);
        assert!((pair.eta - DMatrix::identity(2, 2)).abs().max() == 0.0);
    }

    #[test]
    fn rank_deficient_square_matrix_matches_hand_result() {
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let pair = theta_eta(&sigma, DEFAULT_RANK_TOLERANCE).unwrap();
        assert_eq!(pair.rank, 1);
        let expected_theta = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]);
        assert!((&pair.theta - &expected_theta).abs().max() < 1e-12);
        let expected_eta = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert!((&pair.eta - &expected_eta).abs().max() < 1e-12);
        // Cross-check against the iteration-based pseudo-inverse.
        let oracle = newton_schulz_pinv(&sigma);
        assert!((&pair.theta - &oracle).abs().max() < 1e-9);
    }

    #[test]
    fn identities_hold_on_random_matrices_including_rank_deficient() {
        let mut rng = RandomStream::new(99, 0).rng();
        for trial in 0..1000 {
            let m = rng.random_range(1..=6usize);
            let d = rng.random_range(m..=6usize);
            let mut sigma = DMatrix::from_fn(m, d, |_, _| rng.random_range(-2.0..2.0));
            if trial % 5 == 0 && m > 1 {
                // Make 20% of the draws rank-deficient by duplicating a row.
                let row = sigma.row(0).into_owned();
                sigma.set_row(m - 1, &row);
            }
            let pair = theta_eta(&sigma, DEFAULT_RANK_TOLERANCE).unwrap();
            let residual = pair.max_identity_residual(&sigma);
            assert!(
                residual <= 1e-9,
                "trial {trial}: residual {residual} for sigma {sigma}"
            );
        }
    }

    #[test]
    fn svd_route_agrees_with_newton_schulz_oracle() {
        let mut rng = RandomStream::new(123, 0).rng();
        for _ in 0..50 {
            let m = rng.random_range(1..=4usize);
            let d = rng.random_range(m..=5usize);
            let sigma = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.5..1.5));
            let pair = theta_eta(&sigma, DEFAULT_RANK_TOLERANCE).unwrap();
            let oracle = newton_schulz_pinv(&sigma);
            assert!(
                (&pair.theta - &oracle).abs().max() < 1e-8,
                "mismatch against iterative pseudo-inverse"
            );
        }
    }

    #[test]
    fn row_fast_path_matches_general_route() {
        let mut rng = RandomStream::new(7, 1).rng();
        for _ in 0..100 {
            let d = rng.random_range(1..=6usize);
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sigma = DMatrix::from_row_slice(1, d, &row);
            let pair = theta_eta(&sigma, DEFAULT_RANK_TOLERANCE).unwrap();
            let mut fast = vec![0.0; d];
            theta_row(&row, &mut fast);
            for (i, &v) in fast.iter().enumerate() {
                assert!((v - pair.theta[(i, 0)]).abs() < 1e-12);
            }
        }
    }
}
