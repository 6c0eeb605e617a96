//! Seeded Monte Carlo checks of the integrated-MSE bounds.
//!
//! The spatial integral is a midpoint rule with `g` nodes per inter-sensor
//! gap. Between the nodes the field is treated as *sensor-conditional ground
//! truth*: given the sensor vector `X`, the field at a node `s` is Gaussian
//! with mean `a(s) . X` and variance `v(s)`, where `a(s) = sigma^{-1} c(s)` and
//! `c(s)` holds the correlations between `s` and the sensors. The conditional
//! expectation of the squared error at `s` is then
//!
//! `v(s) + (a(s) . X - xhat(s))^2`,
//!
//! which is what is averaged. Only the sensor vector is simulated. When the
//! interpolated error is uncorrelated with the sensor errors this reduces to
//! `1 - rho^2 + rho^2 (X_n - Xtilde_n)^2`; that simpler value is reported
//! alongside as `j_mse_independent` so the gap between the two can be read
//! off.
//!
//! A slower oracle that draws the field at every node jointly with the
//! sensors is available for small N through [`SimOptions::full_field`].

use std::fs::OpenOptions;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::Distribution;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::TestChannel;
use crate::field::{
    covariance_matrix, sample_snapshots, sensor_positions, CorrelationModel, CovariancePack,
    FieldSnapshots, DEFAULT_CLAMP_FLOOR,
};
use crate::quantizer::ScalarQuantizer;
use crate::rates::{integrated_mse_lower_bound, integrated_mse_upper_bound};
use crate::rng::{self, Domain};

pub const DEFAULT_M: usize = 20_000;
pub const DEFAULT_M_PRIME: usize = 2_000;
pub const DEFAULT_GRID: usize = 8;
/// Width of the statistical margin, in standard errors.
pub const MARGIN_SIGMAS: f64 = 3.0;
/// Largest N accepted by the full-field oracle.
pub const FULL_FIELD_MAX_N: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    DscTestChannel,
    P2pLloyd,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::DscTestChannel => "dsc-test-channel",
            Scheme::P2pLloyd => "p2p-lloyd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Within,
    ViolatedLow,
    ViolatedHigh,
}

impl Verdict {
    pub fn classify(value: f64, stderr: f64, low: f64, high: f64) -> Self {
        let margin = MARGIN_SIGMAS * stderr;
        if value < low - margin {
            Verdict::ViolatedLow
        } else if value > high + margin {
            Verdict::ViolatedHigh
        } else {
            Verdict::Within
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Within => "within",
            Verdict::ViolatedLow => "violated-low",
            Verdict::ViolatedHigh => "violated-high",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scheme: Scheme,
    pub model: String,
    pub n: usize,
    pub k: Option<usize>,
    pub p: Option<f64>,
    /// Quantizer levels; `None` for the identity coder.
    pub levels: Option<usize>,
    pub designed_distortion: Option<f64>,
    pub j_mse: f64,
    pub stderr_jmse: f64,
    pub j_prime_mse: f64,
    pub stderr_jprime: f64,
    pub per_sensor_mse: Vec<f64>,
    pub j_mse_independent: f64,
    /// `j_mse - j_mse_independent` and the standard error of that paired difference.
    pub cross_term: f64,
    pub stderr_cross_term: f64,
    pub n_snapshots: usize,
    pub grid_points_per_gap: usize,
    pub seed: u64,
    pub bound_low: f64,
    pub bound_high: f64,
    pub verdict: Verdict,
    pub full_field: bool,
    pub label: String,
}

impl SimulationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Whether the independent-error formula agrees with `j_mse` within the margin.
    pub fn independent_formula_holds(&self) -> bool {
        self.cross_term.abs() <= MARGIN_SIGMAS * self.stderr_cross_term
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    /// Draw the field at every quadrature node instead of conditioning on the sensors.
    pub full_field: bool,
    pub clamp_floor: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            full_field: false,
            clamp_floor: DEFAULT_CLAMP_FLOOR,
        }
    }
}

/// Midpoint nodes over `[0, 1]` and the conditional law of the field at each
/// node given the sensor vector.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    n: usize,
    g: usize,
    nodes: Vec<f64>,
    nearest: Vec<usize>,
    rho_nearest: Vec<f64>,
    /// Row `q` is `a(s_q)`.
    cond_mean: DMatrix<f64>,
    cond_var: Vec<f64>,
    /// Row `q` is `c(s_q)` expressed in the eigenbasis of the covariance.
    coeffs: DMatrix<f64>,
}

impl QuadratureRule {
    pub fn new(model: &CorrelationModel, cov: &CovariancePack, g: usize) -> Result<Self> {
        if g < 2 {
            return Err(Error::param("grid_g", format!("need at least 2 points per gap, got {g}")));
        }
        let n = cov.n();
        let grid = sensor_positions(n)?;
        let pos = grid.positions();
        let nodes: Vec<f64> = (0..n * g)
            .map(|q| ((q / g) as f64 + ((q % g) as f64 + 0.5) / g as f64) / n as f64)
            .collect();
        let nearest: Vec<usize> = (0..n * g).map(|q| q / g).collect();
        let rho_nearest: Vec<f64> = nodes
            .iter()
            .zip(&nearest)
            .map(|(s, &k)| model.rho(s - pos[k]))
            .collect();

        let c = DMatrix::from_fn(n * g, n, |q, j| model.rho(nodes[q] - pos[j]));
        let v = cov.eigvecs();
        let lam = cov.eigvals();
        let coeffs = &c * v;
        let mut scaled = coeffs.clone();
        let mut cond_var = vec![1.0; n * g];
        for q in 0..n * g {
            let mut explained = 0.0;
            for (i, &l) in lam.iter().enumerate() {
                let b = coeffs[(q, i)];
                if l > 0.0 {
                    scaled[(q, i)] = b / l;
                    explained += b * b / l;
                } else {
                    scaled[(q, i)] = 0.0;
                }
            }
            cond_var[q] = (1.0 - explained).max(0.0);
        }
        let cond_mean = scaled * v.transpose();
        Ok(Self {
            n,
            g,
            nodes,
            nearest,
            rho_nearest,
            cond_mean,
            cond_var,
            coeffs,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn g(&self) -> usize {
        self.g
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Index of the sensor whose interval contains each node.
    pub fn nearest(&self) -> &[usize] {
        &self.nearest
    }

    /// Conditional variance of the field at each node given all sensors.
    pub fn cond_var(&self) -> &[f64] {
        &self.cond_var
    }

    /// Nearest-sample interpolation `rho(s - n(s)) x[n(s)]` at every node.
    pub fn interpolate(&self, samples: &[f64]) -> Vec<f64> {
        self.nearest
            .iter()
            .zip(&self.rho_nearest)
            .map(|(&k, r)| r * samples[k])
            .collect()
    }

    /// Conditional expected integrated squared error of `recon` (values at the
    /// nodes) given the sensor vector `x`.
    pub fn conditional_error(&self, x: &[f64], recon: &[f64]) -> f64 {
        let mean = &self.cond_mean * DVector::from_column_slice(x);
        let total: f64 = (0..self.nodes.len())
            .map(|q| {
                let d = mean[q] - recon[q];
                self.cond_var[q] + d * d
            })
            .sum();
        total / self.nodes.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratedMse {
    pub mean: f64,
    pub stderr: f64,
    pub per_snapshot: Vec<f64>,
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

impl IntegratedMse {
    fn from_values(per_snapshot: Vec<f64>) -> Self {
        let (mean, stderr) = mean_stderr(&per_snapshot);
        Self {
            mean,
            stderr,
            per_snapshot,
        }
    }
}

/// Integrated MSE of `recon_fn` over sensor snapshots, under sensor-conditional
/// ground truth. `recon_fn(i, x)` returns the reconstruction at the rule's
/// nodes for snapshot `i` with sensor values `x`.
pub fn integrated_mse<F>(rule: &QuadratureRule, truth: &FieldSnapshots, recon_fn: F) -> Result<IntegratedMse>
where
    F: Fn(usize, &[f64]) -> Vec<f64> + Sync,
{
    if truth.n() != rule.n() {
        return Err(Error::DimensionMismatch {
            expected: rule.n(),
            got: truth.n(),
        });
    }
    let values: Vec<f64> = (0..truth.m)
        .into_par_iter()
        .map(|i| {
            let x = truth.row(i);
            let recon = recon_fn(i, &x);
            rule.conditional_error(&x, &recon)
        })
        .collect();
    Ok(IntegratedMse::from_values(values))
}

/// Integrated MSE against a field sampled directly at the nodes; row `i` of
/// `dense` holds the field at every node for snapshot `i`.
pub fn integrated_mse_dense<F>(dense: &DMatrix<f64>, recon_fn: F) -> IntegratedMse
where
    F: Fn(usize, &[f64]) -> Vec<f64> + Sync,
{
    let values: Vec<f64> = (0..dense.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = dense.row(i).iter().copied().collect();
            let recon = recon_fn(i, &row);
            row.iter().zip(&recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / row.len() as f64
        })
        .collect();
    IntegratedMse::from_values(values)
}

/// Expected integrated MSE of the test-channel scheme, in closed form.
pub fn dsc_expected_jmse(rule: &QuadratureRule, cov: &CovariancePack, p: f64) -> f64 {
    let v = cov.eigvecs();
    let lam = cov.eigvals();
    let shrink: Vec<f64> = lam.iter().map(|&l| l / (l + p)).collect();
    let gain_sigma: Vec<f64> = (0..rule.n)
        .map(|k| (0..rule.n).map(|i| v[(k, i)].powi(2) * lam[i] * shrink[i]).sum())
        .collect();
    let total: f64 = (0..rule.nodes.len())
        .map(|q| {
            let k = rule.nearest[q];
            let cross: f64 = (0..rule.n).map(|i| v[(k, i)] * shrink[i] * rule.coeffs[(q, i)]).sum();
            let r = rule.rho_nearest[q];
            1.0 - 2.0 * r * cross + r * r * gain_sigma[k]
        })
        .sum();
    total / rule.nodes.len() as f64
}

/// Expected integrated MSE of the TDMA scheme when every active sample is
/// coded with mean squared error `distortion`, averaged over a frame.
pub fn p2p_expected_jmse(model: &CorrelationModel, n: usize, k: usize, distortion: f64, g: usize) -> Result<f64> {
    let plan = P2pPlan::new(model, n, k, g)?;
    let total: f64 = plan
        .rho
        .iter()
        .flat_map(|row| row.iter().map(|r| 1.0 - r * r + r * r * distortion))
        .sum();
    Ok(total / (plan.per * n * g) as f64)
}

/// Node-level interpolation weights of the TDMA scheme for every frame offset.
struct P2pPlan {
    per: usize,
    g: usize,
    /// `rho[j][q]`: correlation between node `q` and the sensor active in its
    /// sub-interval at frame offset `j`.
    rho: Vec<Vec<f64>>,
}

impl P2pPlan {
    fn new(model: &CorrelationModel, n: usize, k: usize, g: usize) -> Result<Self> {
        if k == 0 || !n.is_multiple_of(k) {
            return Err(Error::Precondition(format!("K = {k} must divide N = {n}")));
        }
        if g < 2 {
            return Err(Error::param("grid_g", format!("need at least 2 points per gap, got {g}")));
        }
        let per = n / k;
        let grid = sensor_positions(n)?;
        let pos = grid.positions();
        let rho = (0..per)
            .map(|j| {
                (0..n * g)
                    .map(|q| {
                        let s = ((q / g) as f64 + ((q % g) as f64 + 0.5) / g as f64) / n as f64;
                        let active = (q / g) / per * per + j;
                        model.rho(s - pos[active])
                    })
                    .collect()
            })
            .collect();
        Ok(Self { per, g, rho })
    }

    fn active_sensor(&self, q: usize, j: usize) -> usize {
        (q / self.g) / self.per * self.per + j
    }
}

/// Per-snapshot outcome; reduced sequentially in snapshot order.
struct SnapshotStats {
    j: f64,
    j_ind: f64,
    j_prime: f64,
    sensor_err: Vec<(usize, f64)>,
}

struct Reduced {
    j: (f64, f64),
    j_ind: f64,
    cross: (f64, f64),
    j_prime: (f64, f64),
    per_sensor: Vec<f64>,
}

fn reduce(stats: &[SnapshotStats], n: usize) -> Reduced {
    let j: Vec<f64> = stats.iter().map(|s| s.j).collect();
    let diff: Vec<f64> = stats.iter().map(|s| s.j - s.j_ind).collect();
    let jp: Vec<f64> = stats.iter().map(|s| s.j_prime).collect();
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for s in stats {
        for &(k, e) in &s.sensor_err {
            sums[k] += e;
            counts[k] += 1;
        }
    }
    let per_sensor = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Reduced {
        j: mean_stderr(&j),
        j_ind: stats.iter().map(|s| s.j_ind).sum::<f64>() / stats.len() as f64,
        cross: mean_stderr(&diff),
        j_prime: mean_stderr(&jp),
        per_sensor,
    }
}

/// Joint sampler for the sensors followed by every quadrature node.
fn dense_factor(model: &CorrelationModel, rule_nodes: &[f64], n: usize, clamp_floor: f64) -> Result<DMatrix<f64>> {
    if n > FULL_FIELD_MAX_N {
        return Err(Error::param(
            "full_field",
            format!("the full-field oracle supports N <= {FULL_FIELD_MAX_N}, got {n}"),
        ));
    }
    let grid = sensor_positions(n)?;
    let pts: Vec<f64> = grid.positions().iter().chain(rule_nodes).copied().collect();
    let sigma = DMatrix::from_fn(pts.len(), pts.len(), |i, j| model.rho(pts[i] - pts[j]));
    Ok(CovariancePack::from_matrix(sigma, clamp_floor)?.sampling_factor())
}

fn draw_dense(factor: &DMatrix<f64>, seed: u64, i: usize) -> Vec<f64> {
    let mut rng = rng::stream(seed, Domain::DenseField, i as u64);
    let z = DVector::from_iterator(factor.ncols(), (0..factor.ncols()).map(|_| StandardNormal.sample(&mut rng)));
    (factor * z).iter().copied().collect()
}

fn squared_error_at_nodes(field: &[f64], recon: &[f64]) -> f64 {
    field.iter().zip(recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / field.len() as f64
}

/// Simulates the two-step reconstruction of the distributed scheme: MMSE
/// estimation of the sensor samples from `U = X + Z`, then nearest-sample
/// interpolation.
pub fn simulate_dsc(
    model: &CorrelationModel,
    n: usize,
    p: f64,
    m: usize,
    grid_g: usize,
    seed: u64,
) -> Result<SimulationReport> {
    simulate_dsc_with(model, n, p, m, grid_g, seed, &SimOptions::default())
}

pub fn simulate_dsc_with(
    model: &CorrelationModel,
    n: usize,
    p: f64,
    m: usize,
    grid_g: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<SimulationReport> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::param("p", format!("must be positive and finite, got {p}")));
    }
    if m == 0 {
        return Err(Error::param("m", "need at least one snapshot"));
    }
    let half_gap = 0.5 / n.max(1) as f64;
    if half_gap > model.theta_mono() || !(model.rho(half_gap) > 0.0) {
        return Err(Error::Precondition(format!(
            "the integrated-MSE bounds need rho decreasing and positive on [0, 1/(2N)]; N = {n} is too small for {}",
            model.label()
        )));
    }
    let grid = sensor_positions(n)?;
    let cov = covariance_matrix(model, &grid, opts.clamp_floor)?;
    let rule = QuadratureRule::new(model, &cov, grid_g)?;
    let gain = TestChannel::new(&cov, p)?.gain_matrix()?;
    let sd = p.sqrt();
    let q_len = rule.nodes.len();

    let estimate = |i: usize, x: &[f64]| -> Vec<f64> {
        let mut rng = rng::stream(seed, Domain::ChannelNoise, i as u64);
        let u = DVector::from_iterator(
            n,
            x.iter().map(|xi| {
                let z: f64 = StandardNormal.sample(&mut rng);
                xi + sd * z
            }),
        );
        (&gain * u).iter().copied().collect()
    };
    let finish = |x: &[f64], xt: &[f64], j: f64| -> SnapshotStats {
        let errs: Vec<f64> = x.iter().zip(xt).map(|(a, b)| (a - b) * (a - b)).collect();
        let j_ind = (0..q_len)
            .map(|q| {
                let r = rule.rho_nearest[q];
                1.0 - r * r + r * r * errs[rule.nearest[q]]
            })
            .sum::<f64>()
            / q_len as f64;
        SnapshotStats {
            j,
            j_ind,
            j_prime: errs.iter().sum::<f64>() / n as f64,
            sensor_err: errs.into_iter().enumerate().collect(),
        }
    };

    let stats: Vec<SnapshotStats> = if opts.full_field {
        let factor = dense_factor(model, &rule.nodes, n, opts.clamp_floor)?;
        (0..m)
            .into_par_iter()
            .map(|i| {
                let joint = draw_dense(&factor, seed, i);
                let (x, field) = joint.split_at(n);
                let xt = estimate(i, x);
                let j = squared_error_at_nodes(field, &rule.interpolate(&xt));
                finish(x, &xt, j)
            })
            .collect()
    } else {
        let snaps = sample_snapshots(&cov, m, seed)?;
        (0..m)
            .into_par_iter()
            .map(|i| {
                let x = snaps.row(i);
                let xt = estimate(i, &x);
                let j = rule.conditional_error(&x, &rule.interpolate(&xt));
                finish(&x, &xt, j)
            })
            .collect()
    };

    let red = reduce(&stats, n);
    let rho_sq = model.rho(half_gap).powi(2);
    let bound_low = integrated_mse_lower_bound(rho_sq, red.j_prime.0);
    let bound_high = integrated_mse_upper_bound(rho_sq, red.j_prime.0);
    Ok(SimulationReport {
        scheme: Scheme::DscTestChannel,
        model: model.label(),
        n,
        k: None,
        p: Some(p),
        levels: None,
        designed_distortion: None,
        j_mse: red.j.0,
        stderr_jmse: red.j.1,
        j_prime_mse: red.j_prime.0,
        stderr_jprime: red.j_prime.1,
        per_sensor_mse: red.per_sensor,
        j_mse_independent: red.j_ind,
        cross_term: red.cross.0,
        stderr_cross_term: red.cross.1,
        n_snapshots: m,
        grid_points_per_gap: grid_g,
        seed,
        bound_low,
        bound_high,
        verdict: Verdict::classify(red.j.0, red.j.1, bound_low, bound_high),
        full_field: opts.full_field,
        label: format!("test-channel surrogate at finite blocklength m = {m}"),
    })
}

/// How an active sensor codes its sample.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleCoder {
    Quantizer(ScalarQuantizer),
    /// Passes samples through unchanged; the many-level limit of a quantizer.
    Identity,
}

impl SampleCoder {
    pub fn code(&self, x: f64) -> f64 {
        match self {
            SampleCoder::Quantizer(q) => q.quantize(x).1,
            SampleCoder::Identity => x,
        }
    }

    pub fn levels(&self) -> Option<usize> {
        match self {
            SampleCoder::Quantizer(q) => Some(q.levels),
            SampleCoder::Identity => None,
        }
    }

    pub fn distortion(&self) -> f64 {
        match self {
            SampleCoder::Quantizer(q) => q.distortion,
            SampleCoder::Identity => 0.0,
        }
    }
}

/// Simulates the TDMA point-to-point scheme for `m_prime` frames of `N/K`
/// time steps. Each time step sees an independent field snapshot.
pub fn simulate_p2p(
    model: &CorrelationModel,
    n: usize,
    k: usize,
    coder: &SampleCoder,
    m_prime: usize,
    grid_g: usize,
    seed: u64,
) -> Result<SimulationReport> {
    simulate_p2p_with(model, n, k, coder, m_prime, grid_g, seed, &SimOptions::default())
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_p2p_with(
    model: &CorrelationModel,
    n: usize,
    k: usize,
    coder: &SampleCoder,
    m_prime: usize,
    grid_g: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<SimulationReport> {
    if m_prime == 0 {
        return Err(Error::param("m_prime", "need at least one frame"));
    }
    let plan = P2pPlan::new(model, n, k, grid_g)?;
    let grid = sensor_positions(n)?;
    let cov = covariance_matrix(model, &grid, opts.clamp_floor)?;
    let rule = QuadratureRule::new(model, &cov, grid_g)?;
    let steps = m_prime * plan.per;
    let q_len = rule.nodes.len();

    let reconstruct = |t: usize, x: &[f64]| -> (Vec<f64>, Vec<(usize, f64)>, f64) {
        let j = t % plan.per;
        let coded: Vec<(usize, f64, f64)> = (0..k)
            .map(|l| {
                let r = plan.per * l + j;
                let y = coder.code(x[r]);
                (r, y, (x[r] - y) * (x[r] - y))
            })
            .collect();
        let recon = (0..q_len)
            .map(|q| plan.rho[j][q] * coded[plan.active_sensor(q, j) / plan.per].1)
            .collect();
        let j_ind = (0..q_len)
            .map(|q| {
                let rho = plan.rho[j][q];
                1.0 - rho * rho + rho * rho * coded[plan.active_sensor(q, j) / plan.per].2
            })
            .sum::<f64>()
            / q_len as f64;
        (recon, coded.iter().map(|&(r, _, e)| (r, e)).collect(), j_ind)
    };
    let finish = |j: f64, sensor_err: Vec<(usize, f64)>, j_ind: f64| SnapshotStats {
        j,
        j_ind,
        j_prime: sensor_err.iter().map(|e| e.1).sum::<f64>() / k as f64,
        sensor_err,
    };

    let stats: Vec<SnapshotStats> = if opts.full_field {
        let factor = dense_factor(model, &rule.nodes, n, opts.clamp_floor)?;
        (0..steps)
            .into_par_iter()
            .map(|t| {
                let joint = draw_dense(&factor, seed, t);
                let (x, field) = joint.split_at(n);
                let (recon, errs, j_ind) = reconstruct(t, x);
                finish(squared_error_at_nodes(field, &recon), errs, j_ind)
            })
            .collect()
    } else {
        let snaps = sample_snapshots(&cov, steps, seed)?;
        (0..steps)
            .into_par_iter()
            .map(|t| {
                let x = snaps.row(t);
                let (recon, errs, j_ind) = reconstruct(t, &x);
                finish(rule.conditional_error(&x, &recon), errs, j_ind)
            })
            .collect()
    };

    let red = reduce(&stats, n);
    let r = model.rho(1.0 / k as f64);
    let bound_high = 1.0 - r * r + red.j_prime.0;
    let label = match coder.levels() {
        Some(l) => format!("Lloyd-Max L = {l}, m' = {m_prime} frames"),
        None => format!("identity coder, m' = {m_prime} frames"),
    };
    Ok(SimulationReport {
        scheme: Scheme::P2pLloyd,
        model: model.label(),
        n,
        k: Some(k),
        p: None,
        levels: coder.levels(),
        designed_distortion: Some(coder.distortion()),
        j_mse: red.j.0,
        stderr_jmse: red.j.1,
        j_prime_mse: red.j_prime.0,
        stderr_jprime: red.j_prime.1,
        per_sensor_mse: red.per_sensor,
        j_mse_independent: red.j_ind,
        cross_term: red.cross.0,
        stderr_cross_term: red.cross.1,
        n_snapshots: steps,
        grid_points_per_gap: grid_g,
        seed,
        bound_low: 0.0,
        bound_high,
        verdict: Verdict::classify(red.j.0, red.j.1, 0.0, bound_high),
        full_field: opts.full_field,
        label,
    })
}

#[derive(Serialize)]
struct LogRow<'a> {
    scheme: String,
    model: &'a str,
    n: usize,
    k: Option<usize>,
    p: Option<f64>,
    levels: Option<usize>,
    seed: u64,
    n_snapshots: usize,
    grid_points_per_gap: usize,
    full_field: bool,
    j_mse: f64,
    stderr_jmse: f64,
    j_prime_mse: f64,
    stderr_jprime: f64,
    j_mse_independent: f64,
    bound_low: f64,
    bound_high: f64,
    verdict: String,
}

/// Appends reports to a CSV log, writing the header when the file is new or empty.
pub fn append_csv_log(path: impl AsRef<Path>, reports: &[SimulationReport]) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in reports {
        w.serialize(LogRow {
            scheme: r.scheme.to_string(),
            model: &r.model,
            n: r.n,
            k: r.k,
            p: r.p,
            levels: r.levels,
            seed: r.seed,
            n_snapshots: r.n_snapshots,
            grid_points_per_gap: r.grid_points_per_gap,
            full_field: r.full_field,
            j_mse: r.j_mse,
            stderr_jmse: r.stderr_jmse,
            j_prime_mse: r.j_prime_mse,
            stderr_jprime: r.stderr_jprime,
            j_mse_independent: r.j_mse_independent,
            bound_low: r.bound_low,
            bound_high: r.bound_high,
            verdict: r.verdict.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::average_mse;
    use crate::quantizer::lloyd_max_default;

    fn pack(model: &CorrelationModel, n: usize) -> CovariancePack {
        covariance_matrix(model, &sensor_positions(n).unwrap(), DEFAULT_CLAMP_FLOOR).unwrap()
    }

    #[test]
    fn perfect_reconstruction_single_sensor() {
        let exp = CorrelationModel::exp_markov();
        let cov = pack(&exp, 1);
        let rule = QuadratureRule::new(&exp, &cov, 400).unwrap();
        let truth = sample_snapshots(&cov, 50, 3).unwrap();
        let r = integrated_mse(&rule, &truth, |_, x| rule.interpolate(x)).unwrap();
        // midpoint rule error is O(g^-2)
        assert!((r.mean - (-1.0f64).exp()).abs() < 1e-5, "{}", r.mean);
        assert!(r.stderr < 1e-12);
    }

    #[test]
    fn zero_field_zero_reconstruction() {
        let dense = DMatrix::zeros(5, 32);
        let r = integrated_mse_dense(&dense, |_, row| vec![0.0; row.len()]);
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn grid_refinement_is_stable() {
        let exp = CorrelationModel::exp_markov();
        let cov = pack(&exp, 16);
        let truth = sample_snapshots(&cov, 200, 9).unwrap();
        let run = |g| {
            let rule = QuadratureRule::new(&exp, &cov, g).unwrap();
            integrated_mse(&rule, &truth, |_, x| rule.interpolate(x)).unwrap().mean
        };
        let (a, b) = (run(8), run(16));
        assert!(((a - b) / b).abs() < 0.005, "{a} vs {b}");
    }

    #[test]
    fn conditional_law_is_consistent() {
        // a . c + v = 1 for each node, i.e. the conditional split preserves unit variance
        let sinc = CorrelationModel::sinc();
        let cov = pack(&sinc, 12);
        let rule = QuadratureRule::new(&sinc, &cov, 4).unwrap();
        let pos = sensor_positions(12).unwrap();
        for (q, s) in rule.nodes().iter().enumerate() {
            let explained: f64 = (0..12)
                .map(|j| rule.cond_mean[(q, j)] * sinc.rho(s - pos.positions()[j]))
                .sum();
            assert!((explained + rule.cond_var()[q] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dsc_near_noiseless_limit() {
        let exp = CorrelationModel::exp_markov();
        let rep = simulate_dsc(&exp, 8, 1e-8, 500, 8, 11).unwrap();
        assert!(rep.j_prime_mse < 1e-6);
        let rule = QuadratureRule::new(&exp, &pack(&exp, 8), 8).unwrap();
        let interp_only: f64 =
            rule.rho_nearest.iter().map(|r| 1.0 - r * r).sum::<f64>() / rule.nodes.len() as f64;
        assert!(
            (rep.j_mse - interp_only).abs() < 3.0 * rep.stderr_jmse,
            "{} vs {interp_only}",
            rep.j_mse
        );
        assert_eq!(rep.verdict, Verdict::Within);
    }

    #[test]
    fn dsc_matches_closed_form() {
        let exp = CorrelationModel::exp_markov();
        let (n, p) = (16, 0.3);
        let cov = pack(&exp, n);
        let rep = simulate_dsc(&exp, n, p, 4000, 8, 5).unwrap();
        let rule = QuadratureRule::new(&exp, &cov, 8).unwrap();
        let expect = dsc_expected_jmse(&rule, &cov, p);
        assert!((rep.j_mse - expect).abs() < 3.0 * rep.stderr_jmse, "{} vs {expect}", rep.j_mse);
        let jp = average_mse(&cov, p);
        assert!((rep.j_prime_mse - jp).abs() < 3.0 * rep.stderr_jprime);
        assert_eq!(rep.per_sensor_mse.len(), n);
    }

    #[test]
    fn full_field_agrees_with_conditional() {
        let exp = CorrelationModel::exp_markov();
        let opts = SimOptions {
            full_field: true,
            ..SimOptions::default()
        };
        let dense = simulate_dsc_with(&exp, 6, 0.5, 6000, 4, 21, &opts).unwrap();
        let cov = pack(&exp, 6);
        let expect = dsc_expected_jmse(&QuadratureRule::new(&exp, &cov, 4).unwrap(), &cov, 0.5);
        assert!((dense.j_mse - expect).abs() < 3.0 * dense.stderr_jmse, "{} vs {expect}", dense.j_mse);
        assert!(simulate_dsc_with(&exp, 32, 0.5, 10, 4, 1, &opts).is_err());
    }

    #[test]
    fn dsc_rejects_bad_inputs() {
        let exp = CorrelationModel::exp_markov();
        assert!(simulate_dsc(&exp, 8, 0.0, 10, 8, 1).is_err());
        assert!(simulate_dsc(&exp, 8, 1.0, 0, 8, 1).is_err());
        assert!(simulate_dsc(&exp, 8, 1.0, 10, 1, 1).is_err());
    }

    #[test]
    fn reports_are_deterministic() {
        let sinc = CorrelationModel::sinc();
        let a = simulate_dsc(&sinc, 10, 0.2, 300, 4, 77).unwrap();
        let b = simulate_dsc(&sinc, 10, 0.2, 300, 4, 77).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = simulate_dsc(&sinc, 10, 0.2, 300, 4, 78).unwrap();
        assert_ne!(a.j_mse, c.j_mse);
    }

    #[test]
    fn p2p_identity_coder() {
        let exp = CorrelationModel::exp_markov();
        let rep = simulate_p2p(&exp, 12, 4, &SampleCoder::Identity, 200, 8, 4).unwrap();
        assert_eq!(rep.j_prime_mse, 0.0);
        let r = exp.rho(0.25);
        assert!(rep.j_mse <= 1.0 - r * r + 3.0 * rep.stderr_jmse);
        let expect = p2p_expected_jmse(&exp, 12, 4, 0.0, 8).unwrap();
        assert!((rep.j_mse - expect).abs() < 3.0 * rep.stderr_jmse + 1e-12);
        assert_eq!(rep.verdict, Verdict::Within);
    }

    #[test]
    fn p2p_quantizer_matches_design() {
        let sinc = CorrelationModel::sinc();
        let q = lloyd_max_default(8).unwrap();
        let rep = simulate_p2p(&sinc, 14, 7, &SampleCoder::Quantizer(q.clone()), 2000, 8, 8).unwrap();
        assert!((rep.j_prime_mse - q.distortion).abs() < 3.0 * rep.stderr_jprime);
        assert!(rep.independent_formula_holds(), "{} +- {}", rep.cross_term, rep.stderr_cross_term);
        assert_eq!(rep.n_snapshots, 4000);
        assert_eq!(rep.verdict, Verdict::Within);
    }

    #[test]
    fn p2p_rejects_bad_schedule() {
        let exp = CorrelationModel::exp_markov();
        assert!(simulate_p2p(&exp, 10, 4, &SampleCoder::Identity, 10, 8, 1).is_err());
    }

    #[test]
    fn csv_log_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let exp = CorrelationModel::exp_markov();
        let rep = simulate_dsc(&exp, 4, 0.5, 50, 4, 1).unwrap();
        append_csv_log(&path, std::slice::from_ref(&rep)).unwrap();
        append_csv_log(&path, &[rep]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("scheme,model,n,k,p"));
        assert!(lines[1].starts_with("dsc-test-channel,"));
    }

    #[test]
    fn verdict_margins() {
        assert_eq!(Verdict::classify(1.0, 0.1, 0.0, 0.8), Verdict::Within);
        assert_eq!(Verdict::classify(1.2, 0.1, 0.0, 0.8), Verdict::ViolatedHigh);
        assert_eq!(Verdict::classify(-0.5, 0.1, 0.0, 0.8), Verdict::ViolatedLow);
    }
}
