//! Lloyd-Max scalar quantizers for the unit Gaussian and the point-to-point
//! TDMA scheme built on them.
//!
//! In the TDMA scheme `[0, 1]` is cut into `K` equal sub-intervals with `N/K`
//! sensors each. Time runs in frames of `N/K` steps; in every frame each
//! sensor is active once, and at every step exactly one sensor per
//! sub-interval is active. An active sensor codes its own sample with no
//! knowledge of the field statistics.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::field::CorrelationModel;

pub const DEFAULT_LLOYD_TOL: f64 = 1e-12;
pub const DEFAULT_LLOYD_MAX_ITER: usize = 1_000_000;

/// Sum rates above this are reported as capped in a K scan.
pub const DEFAULT_RATE_CAP_NATS: f64 = 1e6;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        INV_SQRT_2PI * (-0.5 * x * x).exp()
    }
}

/// Upper tail `P(X > x)`, accurate far into both tails.
fn tail(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Probability of the cell `[a, b]` under the unit Gaussian.
fn cell_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        tail(a) - tail(b)
    } else if b <= 0.0 {
        tail(-b) - tail(-a)
    } else {
        1.0 - tail(b) - tail(-a)
    }
}

/// `x phi(x)`, with the limit 0 at infinity.
fn x_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        x * pdf(x)
    }
}

/// Conditional mean of the unit Gaussian on `[a, b]`.
fn centroid(a: f64, b: f64) -> f64 {
    let mass = cell_mass(a, b);
    if mass > 0.0 {
        (pdf(a) - pdf(b)) / mass
    } else {
        // cell too far in the tail to carry mass in f64
        if a.is_finite() { a } else { b }
    }
}

/// `E[(X - y)^2; a < X < b]` in closed form.
fn cell_distortion(a: f64, b: f64, y: f64) -> f64 {
    let mass = cell_mass(a, b);
    let first = pdf(a) - pdf(b);
    let second = mass + x_pdf(a) - x_pdf(b);
    (second - 2.0 * y * first + y * y * mass).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarQuantizer {
    pub levels: usize,
    pub boundaries: Vec<f64>,
    pub points: Vec<f64>,
    pub distortion: f64,
    pub rate_bits: f64,
}

impl ScalarQuantizer {
    /// Builds a quantizer from reproduction points, placing boundaries at
    /// midpoints and computing the Gaussian distortion.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::param("points", "need at least one level"));
        }
        if points.iter().any(|p| !p.is_finite()) || points.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::param("points", "must be finite and strictly increasing"));
        }
        let boundaries: Vec<f64> = points.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let distortion = gaussian_distortion(&boundaries, &points);
        Ok(Self {
            levels: points.len(),
            rate_bits: (points.len() as f64).log2(),
            boundaries,
            points,
            distortion,
        })
    }

    /// Cell index and reproduction value for `x`. A value exactly on a
    /// boundary goes to the upper cell.
    pub fn quantize(&self, x: f64) -> (usize, f64) {
        let idx = self.boundaries.partition_point(|&b| b <= x);
        (idx, self.points[idx])
    }

    /// Largest violation of the two Lloyd conditions, recomputed from the
    /// codebook alone.
    pub fn lloyd_residual(&self) -> f64 {
        let mid = self
            .points
            .windows(2)
            .zip(&self.boundaries)
            .map(|(w, b)| (0.5 * (w[0] + w[1]) - b).abs())
            .fold(0.0, f64::max);
        let cent = (0..self.levels)
            .map(|i| {
                let (a, b) = self.cell(i);
                (centroid(a, b) - self.points[i]).abs()
            })
            .fold(0.0, f64::max);
        mid.max(cent)
    }

    fn cell(&self, i: usize) -> (f64, f64) {
        let a = if i == 0 { f64::NEG_INFINITY } else { self.boundaries[i - 1] };
        let b = self.boundaries.get(i).copied().unwrap_or(f64::INFINITY);
        (a, b)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a codebook and checks that it is internally consistent.
    pub fn from_json(text: &str) -> Result<Self> {
        let q: ScalarQuantizer = serde_json::from_str(text)?;
        q.validate()?;
        Ok(q)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.points.len() != self.levels {
            return Err(Error::param("levels", "does not match the number of points"));
        }
        if self.boundaries.len() + 1 != self.levels {
            return Err(Error::param("boundaries", "must have levels - 1 entries"));
        }
        if self.points.windows(2).any(|w| !(w[0] < w[1]))
            || self.boundaries.windows(2).any(|w| !(w[0] < w[1]))
        {
            return Err(Error::param("codebook", "points and boundaries must be increasing"));
        }
        for (i, b) in self.boundaries.iter().enumerate() {
            if !(self.points[i] <= *b && *b <= self.points[i + 1]) {
                return Err(Error::param("boundaries", "must separate adjacent points"));
            }
        }
        Ok(())
    }
}

fn gaussian_distortion(boundaries: &[f64], points: &[f64]) -> f64 {
    (0..points.len())
        .map(|i| {
            let a = if i == 0 { f64::NEG_INFINITY } else { boundaries[i - 1] };
            let b = boundaries.get(i).copied().unwrap_or(f64::INFINITY);
            cell_distortion(a, b, points[i])
        })
        .sum()
}

/// Lloyd-Max quantizer with `levels` cells for the unit Gaussian.
///
/// Starts from the companding initialisation (quantiles of `N(0, 3)`) and
/// alternates midpoint boundaries with centroid points until the largest
/// point update drops below `tol`.
pub fn lloyd_max(levels: usize, tol: f64, max_iter: usize) -> Result<ScalarQuantizer> {
    if levels == 0 {
        return Err(Error::param("L", "need at least one level"));
    }
    if !(tol > 0.0) {
        return Err(Error::param("tol", "must be positive"));
    }
    if levels == 1 {
        return ScalarQuantizer::from_points(vec![0.0]);
    }
    let wide = Normal::new(0.0, 3f64.sqrt()).expect("valid normal");
    let mut points: Vec<f64> = (0..levels)
        .map(|i| wide.inverse_cdf((i as f64 + 0.5) / levels as f64))
        .collect();
    let mut boundaries = vec![0.0; levels - 1];

    let mut delta = f64::INFINITY;
    for _ in 0..max_iter {
        for (b, w) in boundaries.iter_mut().zip(points.windows(2)) {
            *b = 0.5 * (w[0] + w[1]);
        }
        delta = 0.0;
        for i in 0..levels {
            let a = if i == 0 { f64::NEG_INFINITY } else { boundaries[i - 1] };
            let b = boundaries.get(i).copied().unwrap_or(f64::INFINITY);
            let c = centroid(a, b);
            delta = delta.max((c - points[i]).abs());
            points[i] = c;
        }
        // keep the codebook exactly symmetric
        for i in 0..levels / 2 {
            let j = levels - 1 - i;
            let m = 0.5 * (points[j] - points[i]);
            points[i] = -m;
            points[j] = m;
        }
        if levels % 2 == 1 {
            points[levels / 2] = 0.0;
        }
        if delta < tol {
            return ScalarQuantizer::from_points(points);
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: delta,
    })
}

/// `lloyd_max` with the default tolerance and iteration budget.
pub fn lloyd_max_default(levels: usize) -> Result<ScalarQuantizer> {
    lloyd_max(levels, DEFAULT_LLOYD_TOL, DEFAULT_LLOYD_MAX_ITER)
}

/// Smallest Lloyd-Max quantizer with distortion at most `target`.
pub fn lloyd_max_for_distortion(target: f64, max_levels: usize) -> Result<ScalarQuantizer> {
    if !(target > 0.0) {
        return Err(Error::param("target", format!("must be positive, got {target}")));
    }
    for levels in 1..=max_levels {
        let q = lloyd_max_default(levels)?;
        if q.distortion <= target {
            return Ok(q);
        }
    }
    Err(Error::Precondition(format!(
        "no Lloyd-Max quantizer with at most {max_levels} levels reaches distortion {target}"
    )))
}

/// Gap in bits between the Lloyd-Max rate and the Gaussian rate-distortion
/// function at the same distortion: `log2(L) - 1/2 log2(1 / D(L))`.
pub fn scalar_delta(levels: usize) -> Result<f64> {
    if levels < 2 {
        return Err(Error::param("L", "need at least two levels"));
    }
    let q = lloyd_max_default(levels)?;
    Ok(q.rate_bits - 0.5 * (1.0 / q.distortion).log2())
}

/// Per-sensor distortion budget `D_K = d_net - (1 - rho(1/K)^2)`.
pub fn p2p_distortion_budget(model: &CorrelationModel, d_net: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::param("K", "need at least one sub-interval"));
    }
    if !(d_net > 0.0) || !d_net.is_finite() {
        return Err(Error::param("d_net", format!("must be positive, got {d_net}")));
    }
    let r = model.rho(1.0 / k as f64);
    Ok(d_net - (1.0 - r * r))
}

/// Sum rate of the point-to-point scheme with `K` sub-intervals:
/// `-(K/2) ln D_K` nats per time step, independent of N.
pub fn p2p_rate_for_k(model: &CorrelationModel, d_net: f64, k: usize) -> Result<f64> {
    let d_k = p2p_distortion_budget(model, d_net, k)?;
    if !(d_k > 0.0) {
        return Err(Error::InfeasibleK {
            k,
            reason: format!("1 - rho(1/K)^2 = {:.6} is not below d_net", d_net - d_k),
        });
    }
    if d_k > 1.0 {
        return Err(Error::InfeasibleK {
            k,
            reason: format!("distortion budget {d_k} exceeds the sample variance"),
        });
    }
    Ok(-0.5 * k as f64 * d_k.ln())
}

/// Per-sensor rate `(K/N) R_p` in nats per time step.
pub fn p2p_per_sensor_rate(model: &CorrelationModel, d_net: f64, k: usize, n: usize) -> Result<f64> {
    if n == 0 || !n.is_multiple_of(k) {
        return Err(Error::Precondition(format!("K = {k} must divide N = {n}")));
    }
    Ok(p2p_rate_for_k(model, d_net, k)? / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KScanEntry {
    pub k: usize,
    pub d_k: f64,
    pub feasible: bool,
    pub rate_nats: Option<f64>,
    /// The rate exceeded the scan's cap and was clamped to it.
    pub capped: bool,
}

/// Smallest K with `1 - rho(1/K)^2 < d_net`, searched up to `limit`.
pub fn k_min_feasible(model: &CorrelationModel, d_net: f64, limit: usize) -> Option<usize> {
    (1..=limit).find(|&k| p2p_rate_for_k(model, d_net, k).is_ok())
}

/// Evaluates the sum rate for every `K` in `k_lo..=k_hi`.
pub fn scan_k(
    model: &CorrelationModel,
    d_net: f64,
    k_lo: usize,
    k_hi: usize,
    rate_cap: f64,
) -> Result<Vec<KScanEntry>> {
    let k_lo = k_lo.max(1);
    (k_lo..=k_hi)
        .map(|k| {
            let d_k = p2p_distortion_budget(model, d_net, k)?;
            Ok(match p2p_rate_for_k(model, d_net, k) {
                Ok(rate) => KScanEntry {
                    k,
                    d_k,
                    feasible: true,
                    rate_nats: Some(rate.min(rate_cap)),
                    capped: !(rate <= rate_cap),
                },
                Err(e) if e.is_infeasible() => KScanEntry {
                    k,
                    d_k,
                    feasible: false,
                    rate_nats: None,
                    capped: false,
                },
                Err(e) => return Err(e),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KChoice {
    pub k: usize,
    pub rate_nats: f64,
    pub d_k: f64,
    pub k_min_feasible: usize,
    pub k_max: usize,
}

/// Exhaustive minimisation of the point-to-point sum rate over
/// `K in [K_min_feasible, k_max]`; ties go to the smaller K.
/// `k_max = None` scans up to `10 * K_min_feasible`.
pub fn optimize_k(model: &CorrelationModel, d_net: f64, k_max: Option<usize>) -> Result<KChoice> {
    const SEARCH_LIMIT: usize = 1_000_000;
    let limit = k_max.unwrap_or(SEARCH_LIMIT);
    let k_min = k_min_feasible(model, d_net, limit).ok_or(Error::NoFeasibleK { k_max: limit })?;
    let k_max = k_max.unwrap_or(10 * k_min);
    let scan = scan_k(model, d_net, k_min, k_max, f64::INFINITY)?;
    let best = scan
        .iter()
        .filter_map(|e| e.rate_nats.map(|r| (e, r)))
        .fold(None::<(&KScanEntry, f64)>, |best, (e, r)| match best {
            Some((_, br)) if br <= r => best,
            _ => Some((e, r)),
        })
        .ok_or(Error::NoFeasibleK { k_max })?;
    Ok(KChoice {
        k: best.0.k,
        rate_nats: best.1,
        d_k: best.0.d_k,
        k_min_feasible: k_min,
        k_max,
    })
}

/// Activation schedule of the TDMA scheme. Indices are 0-based: sensor
/// `(N/K) l + j` is active at times `j + r N/K` for `r = 0..m'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdmaSchedule {
    pub n: usize,
    pub k: usize,
    pub m_prime: usize,
    /// Active times of each sensor, ascending.
    pub active: Vec<Vec<usize>>,
}

impl TdmaSchedule {
    pub fn per_interval(&self) -> usize {
        self.n / self.k
    }

    /// Total number of time steps, `m' N / K`.
    pub fn horizon(&self) -> usize {
        self.m_prime * self.per_interval()
    }

    /// Active sensors at time `t`, one per sub-interval, left to right.
    pub fn active_at(&self, t: usize) -> Vec<usize> {
        let per = self.per_interval();
        let j = t % per;
        (0..self.k).map(|l| per * l + j).collect()
    }
}

pub fn tdma_schedule(n: usize, k: usize, m_prime: usize) -> Result<TdmaSchedule> {
    if k == 0 || n == 0 || !n.is_multiple_of(k) {
        return Err(Error::Precondition(format!("K = {k} must divide N = {n}")));
    }
    if m_prime == 0 {
        return Err(Error::param("m_prime", "need at least one frame"));
    }
    let per = n / k;
    let active = (0..n)
        .map(|sensor| {
            let j = sensor % per;
            (0..m_prime).map(|r| j + r * per).collect()
        })
        .collect();
    Ok(TdmaSchedule {
        n,
        k,
        m_prime,
        active,
    })
}

/// Converts a rate in bits to nats.
pub fn bits_to_nats(bits: f64) -> f64 {
    bits * LN_2
}
