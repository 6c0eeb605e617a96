//! Rate and distortion functionals of the distributed and centralized schemes.
//!
//! Rates are in nats per snapshot unless stated otherwise.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::average_mse;
use crate::field::{covariance_matrix, sensor_positions, CorrelationModel, CovariancePack};

/// Largest N scanned when looking for the smallest feasible sensor count.
pub const MAX_SCAN_N: usize = 10_000_000;

pub const DEFAULT_PMAX_REL_TOL: f64 = 1e-6;

/// Default slack `eps = EPS_FRACTION * d_net` in the rate-loss bound.
pub const DEFAULT_EPS_FRACTION: f64 = 0.05;

const THETA_SCAN_POINTS: usize = 10_000;
const MAX_BISECTION_STEPS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    #[default]
    Nats,
    Bits,
}

impl Units {
    pub fn from_nats(self, nats: f64) -> f64 {
        match self {
            Units::Nats => nats,
            Units::Bits => nats / std::f64::consts::LN_2,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Units::Nats => "nats",
            Units::Bits => "bits",
        }
    }
}

impl std::str::FromStr for Units {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nats" => Ok(Units::Nats),
            "bits" => Ok(Units::Bits),
            other => Err(Error::param("units", format!("expected nats or bits, got {other}"))),
        }
    }
}

fn check_d_net(d_net: f64) -> Result<()> {
    if d_net.is_finite() && d_net > 0.0 {
        Ok(())
    } else {
        Err(Error::param("d_net", format!("must be positive, got {d_net}")))
    }
}

/// `rho(1/(2N))^2`, the squared correlation across half a sensor gap.
pub fn half_gap_rho_sq(model: &CorrelationModel, n: usize) -> f64 {
    let r = model.rho(0.5 / n as f64);
    r * r
}

/// Upper bound on the integrated MSE of the two-step reconstruction in terms of
/// the average sensor-sample MSE `j_prime`:
/// `(1 - q) + j' + 2 sqrt(q (1 - q) j')`, with `q = rho(1/(2N))^2`.
pub fn integrated_mse_upper_bound(rho_sq: f64, j_prime: f64) -> f64 {
    let j = j_prime.max(0.0);
    (1.0 - rho_sq) + j + 2.0 * (rho_sq * (1.0 - rho_sq) * j).max(0.0).sqrt()
}

/// Matching lower bound: `q j' - 2 sqrt(q (1 - q) j')`.
pub fn integrated_mse_lower_bound(rho_sq: f64, j_prime: f64) -> f64 {
    let j = j_prime.max(0.0);
    rho_sq * j - 2.0 * (rho_sq * (1.0 - rho_sq) * j).max(0.0).sqrt()
}

fn dsc_target_from_rho_sq(d_net: f64, q: f64) -> Option<f64> {
    let gap = 1.0 - q;
    if !(gap < d_net) {
        return None;
    }
    let a = (d_net - gap * gap).sqrt();
    let b = (q * gap).max(0.0).sqrt();
    if a < b {
        return None;
    }
    Some((a - b) * (a - b))
}

/// Smallest N for which the sensor-sample target `D'(N)` exists.
pub fn smallest_feasible_n(d_net: f64, model: &CorrelationModel) -> Option<usize> {
    (1..=MAX_SCAN_N).find(|&n| dsc_target_from_rho_sq(d_net, half_gap_rho_sq(model, n)).is_some())
}

/// Sensor-sample distortion `D'(N)` that guarantees integrated MSE `d_net`:
///
/// `D'(N) = (sqrt(d_net - (1 - q)^2) - sqrt(q (1 - q)))^2`, `q = rho(1/(2N))^2`,
///
/// i.e. the value of `j'` at which the integrated-MSE upper bound equals `d_net`.
pub fn target_distortion_dsc(d_net: f64, n: usize, model: &CorrelationModel) -> Result<f64> {
    check_d_net(d_net)?;
    if n == 0 {
        return Err(Error::param("N", "need at least one sensor"));
    }
    dsc_target_from_rho_sq(d_net, half_gap_rho_sq(model, n)).ok_or_else(|| Error::TooFewSensors {
        n,
        smallest_feasible: smallest_feasible_n(d_net, model),
    })
}

/// Distortion `D''(N)` that any two-step scheme meeting `d_net` must reach on
/// the sensor samples (the lower bound solved for `j'` at equality):
///
/// `D''(N) = (2 (1 - q) + 2 sqrt((1 - q)(1 - q + d_net)) + d_net) / q`.
pub fn reverse_distortion_bound(d_net: f64, n: usize, model: &CorrelationModel) -> Result<f64> {
    check_d_net(d_net)?;
    if n == 0 {
        return Err(Error::param("N", "need at least one sensor"));
    }
    let half_gap = 0.5 / n as f64;
    let r = model.rho(half_gap);
    if !(r > 0.0) {
        return Err(Error::Precondition(format!("rho(1/(2N)) = {r} must be positive")));
    }
    if half_gap > model.theta_mono() {
        return Err(Error::Precondition(format!(
            "1/(2N) = {half_gap} lies outside the monotone radius {}",
            model.theta_mono()
        )));
    }
    let q = r * r;
    if q < 0.5 {
        return Err(Error::Precondition(format!(
            "rho(1/(2N))^2 = {q} must be at least 1/2"
        )));
    }
    let gap = 1.0 - q;
    Ok((2.0 * gap + 2.0 * (gap * (gap + d_net)).sqrt() + d_net) / q)
}

/// Largest test-channel noise variance `p` with `avg_mse(p) <= d`.
///
/// Brackets with `p_hi` doubling from 1, then bisects until
/// `p_hi <= p_lo (1 + rel_tol)`. The returned `p_lo` satisfies
/// `avg_mse(p_lo) <= d < avg_mse(p_lo (1 + rel_tol))`.
pub fn find_pmax(cov: &CovariancePack, d: f64, rel_tol: f64) -> Result<f64> {
    if !(rel_tol > 0.0 && rel_tol <= 1e-3) {
        return Err(Error::param("rel_tol", format!("must lie in (0, 1e-3], got {rel_tol}")));
    }
    if !d.is_finite() {
        return Err(Error::param("D", "must be finite"));
    }
    let total = cov.eigvals().iter().sum::<f64>() / cov.n() as f64;
    if d >= total {
        return Err(Error::Unbounded(d));
    }
    if d <= cov.clamp_floor() || d <= 0.0 {
        return Err(Error::param(
            "D",
            format!("{d} is at or below the clamp floor {}", cov.clamp_floor()),
        ));
    }

    let feasible = |p: f64| average_mse(cov, p) <= d;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while feasible(hi) {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Unbounded(d));
        }
    }
    for _ in 0..MAX_BISECTION_STEPS {
        if hi <= lo * (1.0 + rel_tol) {
            return Ok(lo);
        }
        if !(feasible(lo) && !feasible(hi)) {
            return Err(Error::Conditioning(format!(
                "p_max bracket [{lo}, {hi}] lost validity; average MSE is not monotone"
            )));
        }
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_BISECTION_STEPS,
        residual: (hi - lo) / hi,
    })
}

/// Sum rate of the distributed scheme with test channel noise `p`:
/// `I(X; X + Z) = 1/2 sum_i ln(1 + lambda_i / p)`.
pub fn dsc_sum_rate(cov: &CovariancePack, p: f64) -> Result<f64> {
    if !(p > 0.0) || p.is_nan() {
        return Err(Error::param("p", format!("must be positive, got {p}")));
    }
    Ok(0.5 * cov.eigvals().iter().map(|&l| (l / p).ln_1p()).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaterfillSolution {
    pub theta_level: f64,
    pub per_mode_rate: Vec<f64>,
    pub total_rate_nats: f64,
    /// Average distortion actually allocated, `mean_i min(lambda_i, level)`.
    pub distortion_achieved: f64,
}

/// Gaussian vector rate-distortion function under an average MSE constraint,
/// by reverse water-filling on the eigenvalues.
pub fn centralized_rate(cov: &CovariancePack, d: f64) -> Result<WaterfillSolution> {
    if !(d > 0.0) || d.is_nan() {
        return Err(Error::param("D", format!("must be positive, got {d}")));
    }
    let eig = cov.eigvals();
    let n = eig.len() as f64;
    let mean = eig.iter().sum::<f64>() / n;
    let max = eig.iter().copied().fold(f64::MIN, f64::max);

    let level = if d >= mean {
        max
    } else {
        let target = n * d;
        let allocated = |t: f64| eig.iter().map(|&l| l.min(t)).sum::<f64>();
        let (mut lo, mut hi) = (0.0f64, max);
        for _ in 0..MAX_BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if allocated(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };

    let per_mode_rate: Vec<f64> = eig
        .iter()
        .map(|&l| if l > level { 0.5 * (l / level).ln() } else { 0.0 })
        .collect();
    Ok(WaterfillSolution {
        theta_level: level,
        total_rate_nats: per_mode_rate.iter().sum(),
        distortion_achieved: eig.iter().map(|&l| l.min(level)).sum::<f64>() / n,
        per_mode_rate,
    })
}

/// Largest `theta <= theta_mono` with `rho(theta) > 0` and
/// `1 - rho(theta)^2 / (1 + theta) <= d`; `p = theta^2 N` is then an
/// admissible noise level for large N.
pub fn find_theta(model: &CorrelationModel, d: f64) -> Result<f64> {
    if !(d > 0.0 && d < 1.0) {
        return Err(Error::param("D", format!("must lie in (0, 1), got {d}")));
    }
    let ok = |t: f64| {
        let r = model.rho(t);
        r > 0.0 && 1.0 - r * r / (1.0 + t) <= d
    };
    let top = model.theta_mono();
    let h = top / THETA_SCAN_POINTS as f64;
    let mut good = 0.0;
    for i in 1..=THETA_SCAN_POINTS {
        let t = if i == THETA_SCAN_POINTS { top } else { i as f64 * h };
        if !ok(t) {
            let (mut lo, mut hi) = (good, t);
            for _ in 0..MAX_BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if ok(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Ok(lo);
        }
        good = t;
    }
    Ok(top)
}

/// Constant bound `1 / (2 theta^2)` on the distributed sum rate.
pub fn prop1_sum_rate_bound(theta: f64) -> Result<f64> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::param("theta", format!("must be positive, got {theta}")));
    }
    Ok(0.5 / (theta * theta))
}

/// Bound `(d_net + eps) / (2 theta^2)` on the excess of the distributed sum
/// rate over the centralized rate.
pub fn rate_loss_bound(d_net: f64, eps: f64, theta: f64) -> Result<f64> {
    check_d_net(d_net)?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::param("eps", format!("must be positive, got {eps}")));
    }
    Ok((d_net + eps) * prop1_sum_rate_bound(theta)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub n: usize,
    pub d_net: f64,
    pub d_prime: Option<f64>,
    pub d_double_prime: Option<f64>,
    pub p_max: Option<f64>,
    pub dsc_sum_rate_nats: Option<f64>,
    pub centralized_rate_nats: Option<f64>,
    pub rate_loss_bound_nats: f64,
    pub theta: f64,
    pub feasible: bool,
    pub clamped_eigenvalues: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateCurveOptions {
    pub clamp_floor: f64,
    pub pmax_rel_tol: f64,
    pub eps_fraction: f64,
}

impl Default for RateCurveOptions {
    fn default() -> Self {
        Self {
            clamp_floor: crate::field::DEFAULT_CLAMP_FLOOR,
            pmax_rel_tol: DEFAULT_PMAX_REL_TOL,
            eps_fraction: DEFAULT_EPS_FRACTION,
        }
    }
}

/// Per-N rate summary. Sensor counts whose `D'(N)` does not exist are
/// returned with `feasible = false` and no rates.
pub fn rate_curve(
    model: &CorrelationModel,
    d_net: f64,
    ns: &[usize],
    opts: &RateCurveOptions,
) -> Result<Vec<RateReport>> {
    if ns.is_empty() {
        return Err(Error::param("N_list", "is empty"));
    }
    if let Some(&0) = ns.iter().find(|&&n| n == 0) {
        return Err(Error::param("N_list", "every N must be at least 1"));
    }
    check_d_net(d_net)?;
    let theta = find_theta(model, d_net.min(1.0 - f64::EPSILON))?;
    let loss = rate_loss_bound(d_net, opts.eps_fraction * d_net, theta)?;

    ns.par_iter()
        .map(|&n| {
            let mut report = RateReport {
                n,
                d_net,
                d_prime: None,
                d_double_prime: None,
                p_max: None,
                dsc_sum_rate_nats: None,
                centralized_rate_nats: None,
                rate_loss_bound_nats: loss,
                theta,
                feasible: false,
                clamped_eigenvalues: 0,
            };
            let d_prime = match target_distortion_dsc(d_net, n, model) {
                Ok(v) => v,
                Err(e) if e.is_infeasible() => return Ok(report),
                Err(e) => return Err(e),
            };
            let cov = covariance_matrix(model, &sensor_positions(n)?, opts.clamp_floor)?;
            let p_max = find_pmax(&cov, d_prime, opts.pmax_rel_tol)?;
            report.feasible = true;
            report.d_prime = Some(d_prime);
            report.p_max = Some(p_max);
            report.dsc_sum_rate_nats = Some(dsc_sum_rate(&cov, p_max)?);
            report.clamped_eigenvalues = cov.clamped_count();
            if let Ok(dpp) = reverse_distortion_bound(d_net, n, model) {
                report.d_double_prime = Some(dpp);
                report.centralized_rate_nats = Some(centralized_rate(&cov, dpp)?.total_rate_nats);
            }
            Ok(report)
        })
        .collect()
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.12e}")).unwrap_or_default()
}

/// Writes the rate curve as CSV. Rate columns carry a `_nats` or `_bits`
/// suffix; missing values are empty cells.
pub fn write_rate_csv<W: Write>(out: W, reports: &[RateReport], units: Units) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let sfx = units.suffix();
    w.write_record([
        "N".to_string(),
        "d_prime".to_string(),
        "d_double_prime".to_string(),
        "p_max".to_string(),
        format!("dsc_rate_{sfx}"),
        format!("centralized_rate_{sfx}"),
        format!("loss_bound_{sfx}"),
        "feasible".to_string(),
    ])?;
    for r in reports {
        w.write_record([
            r.n.to_string(),
            opt_cell(r.d_prime),
            opt_cell(r.d_double_prime),
            opt_cell(r.p_max),
            opt_cell(r.dsc_sum_rate_nats.map(|x| units.from_nats(x))),
            opt_cell(r.centralized_rate_nats.map(|x| units.from_nats(x))),
            opt_cell(Some(units.from_nats(r.rate_loss_bound_nats))),
            r.feasible.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
