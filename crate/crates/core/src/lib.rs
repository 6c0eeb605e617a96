//! Achievable rates, distortion targets and quantizer designs for dense
//! sensor sampling of a one-dimensional stationary Gaussian field.
//!
//! The crate covers three coding schemes for `N` sensors on `[0, 1]`:
//!
//! * distributed coding through the additive test channel `U = X + Z`
//!   ([`rates::dsc_sum_rate`], [`rates::find_pmax`]),
//! * the centralized reference scheme, via reverse water-filling
//!   ([`rates::centralized_rate`]),
//! * point-to-point TDMA coding with scalar quantizers
//!   ([`quantizer::optimize_k`], [`quantizer::lloyd_max`]),
//!
//! plus a seeded Monte Carlo harness ([`sim`]) that checks the integrated-MSE
//! bounds each scheme relies on.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimation;
pub mod field;
pub mod quantizer;
pub mod rates;
mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use estimation::{MmseResult, TestChannel};
pub use field::{
    covariance_matrix, make_correlation, sample_snapshots, sensor_positions, CorrelationKind,
    CorrelationModel, CorrelationTable, CovariancePack, FieldSnapshots, SensorGrid,
};
pub use quantizer::{lloyd_max, optimize_k, tdma_schedule, ScalarQuantizer, TdmaSchedule};
pub use rates::{RateReport, Units};
pub use sim::{simulate_dsc, simulate_p2p, SampleCoder, Scheme, SimulationReport, Verdict};
