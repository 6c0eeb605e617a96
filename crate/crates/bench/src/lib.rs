//! Shared fixtures for the criterion benchmarks.

use densefield_core::field::DEFAULT_CLAMP_FLOOR;
use densefield_core::{covariance_matrix, sensor_positions, CorrelationModel, CovariancePack};

/// The two fields used throughout the benchmarks.
pub fn models() -> [(&'static str, CorrelationModel); 2] {
    [
        ("sinc", CorrelationModel::sinc()),
        ("exp", CorrelationModel::exp_markov()),
    ]
}

pub fn pack(model: &CorrelationModel, n: usize) -> CovariancePack {
    covariance_matrix(model, &sensor_positions(n).unwrap(), DEFAULT_CLAMP_FLOOR).unwrap()
}
