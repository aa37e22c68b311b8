//! Shared fixtures for the quantizer benchmarks.

use codeq::quantizer::PointId;
use codeq::stream::{drifting_mixture, MixtureConfig, Vectors};

/// A drifting mixture of `n` rows, with the first `live` ids as the initial set.
pub fn fixture(n: usize, dim: usize, live: usize) -> (Vectors<f32>, Vec<PointId>) {
    let (data, _) = drifting_mixture(&MixtureConfig::new(n, dim, 10, 7)).expect("valid mixture");
    (data, (0..live as PointId).collect())
}
