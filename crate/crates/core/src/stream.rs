//! Reproducible, splittable random streams.
//!
//! Every simulated path owns a `(master_seed, stream_id)` pair. The pair maps
//! to an independent ChaCha stream, so results do not depend on scheduling:
//! path-level parallelism cannot change a single drawn number.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Identifier of one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RandomStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        RandomStream {
            master_seed,
            stream_id,
        }
    }

    /// Stream with the same master seed and a shifted id.
    pub fn offset(&self, by: u64) -> Self {
        RandomStream {
            master_seed: self.master_seed,
            stream_id: self.stream_id.wrapping_add(by),
        }
    }

    /// Disjoint block of ids for a sub-computation. Blocks of size 2^32
    /// keep iteration batches and final re-evaluations from colliding.
    pub fn block(&self, index: u64) -> Self {
        self.offset(index.wrapping_mul(1 << 32))
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Gaussian increments for one path: `n_steps` vectors of `R^dim`, each
/// coordinate N(0, dt), flattened with stride `dim`.
pub fn brownian_increments(stream: RandomStream, grid: TimeGrid, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::invalid("driver dimension must be positive"));
    }
    let sqrt_dt = grid.dt().sqrt();
    let mut rng = stream.rng();
    let mut out = vec![0.0; grid.n_steps() * dim];
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * sqrt_dt;
    }
    Ok(out)
}
