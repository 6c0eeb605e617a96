//! The stationary unit-variance Gaussian field on [0, 1], the regular sensor
//! grid, the sensor-sample covariance and the nearest-sample interpolator.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Default lower clamp applied to covariance eigenvalues.
pub const DEFAULT_CLAMP_FLOOR: f64 = 1e-10;

const MONO_SCAN_POINTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationKind {
    /// `sin(pi a t) / (pi a t)`, a band-limited field. Optional param: `a` (default 1).
    Sinc,
    /// `exp(-a |t|)`, the Gauss-Markov field. Optional param: `a` (default 1).
    ExpMarkov,
    /// Piecewise-linear interpolation of a tabulated autocorrelation.
    CustomTable,
}

impl fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorrelationKind::Sinc => "sinc",
            CorrelationKind::ExpMarkov => "exp-markov",
            CorrelationKind::CustomTable => "custom-table",
        })
    }
}

impl FromStr for CorrelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinc" => Ok(CorrelationKind::Sinc),
            "exp" | "exp-markov" => Ok(CorrelationKind::ExpMarkov),
            "table" | "custom-table" => Ok(CorrelationKind::CustomTable),
            other => Err(Error::UnknownModel(other.to_string())),
        }
    }
}

/// Tabulated autocorrelation: strictly increasing lags starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    taus: Vec<f64>,
    rhos: Vec<f64>,
}

impl CorrelationTable {
    pub fn new(taus: Vec<f64>, rhos: Vec<f64>) -> Result<Self> {
        if taus.len() != rhos.len() {
            return Err(Error::InvalidTable(format!(
                "{} lags but {} values",
                taus.len(),
                rhos.len()
            )));
        }
        if taus.len() < 2 {
            return Err(Error::InvalidTable("need at least two rows".into()));
        }
        if taus[0] != 0.0 {
            return Err(Error::InvalidTable(format!(
                "first lag must be 0, got {}",
                taus[0]
            )));
        }
        if rhos[0] != 1.0 {
            return Err(Error::InvalidTable(format!(
                "rho(0) must be exactly 1, got {}",
                rhos[0]
            )));
        }
        if let Some(w) = taus.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidTable(format!(
                "lags must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if let Some(r) = rhos.iter().find(|r| !r.is_finite() || r.abs() > 1.0) {
            return Err(Error::InvalidTable(format!("value {r} outside [-1, 1]")));
        }
        let last = *taus.last().unwrap();
        if !last.is_finite() || last < 1.0 {
            return Err(Error::InvalidTable(format!(
                "table must cover lags up to 1, last lag is {last}"
            )));
        }
        Ok(Self { taus, rhos })
    }

    /// Reads a two-column `tau,rho` CSV. A single non-numeric header row is skipped.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut taus = Vec::new();
        let mut rhos = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != 2 {
                return Err(Error::InvalidTable(format!(
                    "row {} has {} columns, expected 2",
                    row + 1,
                    record.len()
                )));
            }
            let parsed = (record[0].parse::<f64>(), record[1].parse::<f64>());
            match parsed {
                (Ok(t), Ok(r)) => {
                    taus.push(t);
                    rhos.push(r);
                }
                _ if row == 0 => continue,
                _ => {
                    return Err(Error::InvalidTable(format!(
                        "row {} is not numeric: {:?}",
                        row + 1,
                        record
                    )))
                }
            }
        }
        Self::new(taus, rhos)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn rhos(&self) -> &[f64] {
        &self.rhos
    }

    fn eval(&self, tau: f64) -> f64 {
        let t = tau.abs();
        let last = self.taus.len() - 1;
        if t >= self.taus[last] {
            return self.rhos[last];
        }
        // first index with taus[i] > t; i >= 1 because taus[0] = 0 <= t
        let i = self.taus.partition_point(|&x| x <= t);
        let (t0, t1) = (self.taus[i - 1], self.taus[i]);
        let (r0, r1) = (self.rhos[i - 1], self.rhos[i]);
        r0 + (r1 - r0) * (t - t0) / (t1 - t0)
    }

    /// Largest lag up to which the table never increases.
    fn monotone_radius(&self) -> f64 {
        let first_rise = self.rhos.windows(2).position(|w| w[1] > w[0]);
        match first_rise {
            Some(i) => self.taus[i].min(1.0),
            None => 1.0,
        }
    }
}

/// Autocorrelation function of the field, `rho(t) = E[X(s) X(s + t)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationModel {
    kind: CorrelationKind,
    params: Vec<f64>,
    theta_mono: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    table: Option<CorrelationTable>,
}

impl CorrelationModel {
    pub fn sinc() -> Self {
        make_correlation(CorrelationKind::Sinc, &[]).expect("default sinc model is valid")
    }

    pub fn exp_markov() -> Self {
        make_correlation(CorrelationKind::ExpMarkov, &[]).expect("default exp model is valid")
    }

    pub fn from_table(table: CorrelationTable) -> Self {
        let theta_mono = table.monotone_radius();
        Self {
            kind: CorrelationKind::CustomTable,
            params: Vec::new(),
            theta_mono,
            table: Some(table),
        }
    }

    pub fn kind(&self) -> CorrelationKind {
        self.kind
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Radius of the neighbourhood of 0 on which `rho` is non-increasing.
    pub fn theta_mono(&self) -> f64 {
        self.theta_mono
    }

    pub fn table(&self) -> Option<&CorrelationTable> {
        self.table.as_ref()
    }

    /// Short label used in file names and CSV/JSON output.
    pub fn label(&self) -> String {
        match (self.kind, self.params.first()) {
            (CorrelationKind::CustomTable, _) => "table".to_string(),
            (kind, Some(a)) if *a != 1.0 => format!("{kind}:{a}"),
            (kind, _) => kind.to_string(),
        }
    }

    #[inline]
    pub fn rho(&self, tau: f64) -> f64 {
        match self.kind {
            CorrelationKind::Sinc => {
                let x = std::f64::consts::PI * self.scale() * tau;
                if x.abs() < 1e-8 {
                    1.0 - x * x / 6.0
                } else {
                    x.sin() / x
                }
            }
            CorrelationKind::ExpMarkov => (-self.scale() * tau.abs()).exp(),
            CorrelationKind::CustomTable => self
                .table
                .as_ref()
                .expect("custom-table model always carries a table")
                .eval(tau),
        }
    }

    fn scale(&self) -> f64 {
        self.params.first().copied().unwrap_or(1.0)
    }
}

/// Builds a correlation model of the given kind.
///
/// For `Sinc` and `ExpMarkov`, `params` is empty or a single positive scale.
/// For `CustomTable`, `params` are values of `rho` on a uniform lag grid over
/// [0, 1] (first entry at lag 0, last at lag 1).
pub fn make_correlation(kind: CorrelationKind, params: &[f64]) -> Result<CorrelationModel> {
    match kind {
        CorrelationKind::Sinc | CorrelationKind::ExpMarkov => {
            if params.len() > 1 {
                return Err(Error::param("params", format!("{kind} takes at most one scale")));
            }
            if let Some(&a) = params.first() {
                if !(a.is_finite() && a > 0.0) {
                    return Err(Error::param("params", format!("scale must be positive, got {a}")));
                }
            }
            let mut model = CorrelationModel {
                kind,
                params: params.to_vec(),
                theta_mono: 1.0,
                table: None,
            };
            if kind == CorrelationKind::Sinc {
                model.theta_mono = first_stationary_point(|t| model.rho(t));
            }
            Ok(model)
        }
        CorrelationKind::CustomTable => {
            if params.len() < 2 {
                return Err(Error::InvalidTable(
                    "custom table needs at least two values".into(),
                ));
            }
            let steps = (params.len() - 1) as f64;
            let taus = (0..params.len()).map(|i| i as f64 / steps).collect();
            let table = CorrelationTable::new(taus, params.to_vec())?;
            let mut model = CorrelationModel::from_table(table);
            model.params = params.to_vec();
            Ok(model)
        }
    }
}

/// First local minimum of `f` on (0, 1], or 1 when `f` never turns upward.
/// Grid scan followed by golden-section refinement.
fn first_stationary_point(f: impl Fn(f64) -> f64) -> f64 {
    let h = 1.0 / MONO_SCAN_POINTS as f64;
    let mut prev = f(0.0);
    for i in 1..=MONO_SCAN_POINTS {
        let t = i as f64 * h;
        let v = f(t);
        if v > prev {
            let lo = ((i as f64) - 2.0).max(0.0) * h;
            return golden_section_min(&f, lo, t, 1e-12);
        }
        prev = v;
    }
    1.0
}

fn golden_section_min(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    while (b - a).abs() > tol {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    0.5 * (a + b)
}

/// Sensors at `(2k - 1) / (2N)`, `k = 1..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorGrid {
    positions: Vec<f64>,
}

impl SensorGrid {
    pub fn new(n: usize) -> Result<Self> {
        sensor_positions(n)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Spacing between neighbouring sensors, `1 / N`.
    pub fn spacing(&self) -> f64 {
        1.0 / self.positions.len() as f64
    }
}

pub fn sensor_positions(n: usize) -> Result<SensorGrid> {
    if n == 0 {
        return Err(Error::param("N", "need at least one sensor"));
    }
    let denom = 2.0 * n as f64;
    let positions = (1..=n).map(|k| (2 * k - 1) as f64 / denom).collect();
    Ok(SensorGrid { positions })
}

/// Sensor-sample covariance with a cached symmetric eigendecomposition.
///
/// Eigenvalues are stored in descending order and clamped from below at
/// `clamp_floor`; every downstream computation (sampling, MMSE, log-det,
/// water-filling) uses the clamped spectrum.
#[derive(Debug, Clone)]
pub struct CovariancePack {
    sigma: DMatrix<f64>,
    raw_eigvals: Vec<f64>,
    eigvals: Vec<f64>,
    eigvecs: DMatrix<f64>,
    clamp_floor: f64,
    clamped: usize,
}

impl CovariancePack {
    /// Decomposes an arbitrary symmetric matrix. Asymmetry beyond 1e-12 is rejected.
    pub fn from_matrix(sigma: DMatrix<f64>, clamp_floor: f64) -> Result<Self> {
        if !sigma.is_square() || sigma.nrows() == 0 {
            return Err(Error::param("sigma", "must be a non-empty square matrix"));
        }
        if !(0.0..=1e-6).contains(&clamp_floor) {
            return Err(Error::param(
                "clamp_floor",
                format!("must lie in [0, 1e-6], got {clamp_floor}"),
            ));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelEvaluation("covariance has non-finite entries".into()));
        }
        let n = sigma.nrows();
        for i in 0..n {
            for j in 0..i {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 {
                    return Err(Error::param("sigma", "matrix is not symmetric"));
                }
            }
        }

        let eig = SymmetricEigen::new(sigma.clone());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

        let raw_eigvals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let eigvecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
        let clamped = raw_eigvals.iter().filter(|&&l| l < clamp_floor).count();
        let eigvals = raw_eigvals.iter().map(|&l| l.max(clamp_floor)).collect();

        Ok(Self {
            sigma,
            raw_eigvals,
            eigvals,
            eigvecs,
            clamp_floor,
            clamped,
        })
    }

    pub fn n(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Clamped eigenvalues, descending.
    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    pub fn raw_eigvals(&self) -> &[f64] {
        &self.raw_eigvals
    }

    /// Orthonormal eigenvectors as columns, in the order of [`Self::eigvals`].
    pub fn eigvecs(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    pub fn clamp_floor(&self) -> f64 {
        self.clamp_floor
    }

    /// Number of eigenvalues raised to the clamp floor.
    pub fn clamped_count(&self) -> usize {
        self.clamped
    }

    /// `V diag(f(lambda_i)) V^T` over the clamped spectrum.
    pub fn spectral_map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let scaled = DVector::from_iterator(self.n(), self.eigvals.iter().map(|&l| f(l)));
        let mut left = self.eigvecs.clone();
        for (mut col, s) in left.column_iter_mut().zip(scaled.iter()) {
            col *= *s;
        }
        &left * self.eigvecs.transpose()
    }

    /// The covariance actually used downstream, rebuilt from the clamped spectrum.
    pub fn clamped_sigma(&self) -> DMatrix<f64> {
        self.spectral_map(|l| l)
    }

    /// Max-abs entry of `V diag(raw) V^T - sigma`.
    pub fn reconstruction_error(&self) -> f64 {
        let n = self.n();
        let mut left = self.eigvecs.clone();
        for c in 0..n {
            left.column_mut(c).scale_mut(self.raw_eigvals[c]);
        }
        let rebuilt = &left * self.eigvecs.transpose();
        (rebuilt - &self.sigma).amax()
    }

    /// `V diag(sqrt(lambda))`, so that `F g` has covariance equal to the clamped sigma.
    pub(crate) fn sampling_factor(&self) -> DMatrix<f64> {
        let mut f = self.eigvecs.clone();
        for c in 0..self.n() {
            f.column_mut(c).scale_mut(self.eigvals[c].sqrt());
        }
        f
    }
}

/// Toeplitz covariance `sigma[i][j] = rho(|s_i - s_j|)` of the sensor samples.
pub fn covariance_matrix(
    model: &CorrelationModel,
    grid: &SensorGrid,
    clamp_floor: f64,
) -> Result<CovariancePack> {
    let n = grid.len();
    let s = grid.positions();
    let lags: Vec<f64> = (0..n).map(|d| model.rho(s[d] - s[0])).collect();
    if let Some(bad) = lags.iter().find(|v| !v.is_finite() || v.abs() > 1.0 + 1e-12) {
        return Err(Error::ModelEvaluation(format!(
            "{} produced invalid correlation {bad}",
            model.label()
        )));
    }
    let sigma = DMatrix::from_fn(n, n, |i, j| lags[i.abs_diff(j)]);
    CovariancePack::from_matrix(sigma, clamp_floor)
}

/// `m` independent snapshots of the field at the sensor positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSnapshots {
    /// m x N, row i is the snapshot at time i.
    pub data: DMatrix<f64>,
    pub seed: u64,
    pub m: usize,
}

impl FieldSnapshots {
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }
}

/// Draws `m` i.i.d. `N(0, sigma)` rows using the clamped eigen-factorization.
/// Row `i` depends only on `(seed, i)`.
pub fn sample_snapshots(cov: &CovariancePack, m: usize, seed: u64) -> Result<FieldSnapshots> {
    if m == 0 {
        return Err(Error::param("m", "need at least one snapshot"));
    }
    let factor = cov.sampling_factor();
    let n = cov.n();
    let rows: Vec<DVector<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, Domain::Field, i as u64);
            let g = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
            &factor * g
        })
        .collect();
    let data = DMatrix::from_fn(m, n, |i, j| rows[i][j]);
    Ok(FieldSnapshots { data, seed, m })
}

/// Index `k` (0-based) of the interval `[k/N, (k+1)/N)` containing `s`; `s = 1`
/// belongs to the last interval.
pub fn nearest_sample_index(s: f64, n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::param("N", "need at least one sensor"));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::param("s", format!("{s} is outside [0, 1]")));
    }
    let nf = n as f64;
    let mut k = ((s * nf).floor() as usize).min(n - 1);
    // guard against s*N rounding just below an integer
    if k + 1 < n && (k + 1) as f64 / nf <= s {
        k += 1;
    }
    Ok(k)
}

/// Location of the sample closest to `s`, `n(s) = (2k+1)/(2N)` for `s` in `[k/N, (k+1)/N)`.
pub fn nearest_sample_location(s: f64, n: usize) -> Result<f64> {
    let k = nearest_sample_index(s, n)?;
    Ok((2 * k + 1) as f64 / (2.0 * n as f64))
}

/// `rho(s - n(s)) * recon[n(s)]`.
pub fn interpolate(
    model: &CorrelationModel,
    recon_at_sensors: &[f64],
    grid: &SensorGrid,
    s: f64,
) -> Result<f64> {
    if recon_at_sensors.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: recon_at_sensors.len(),
        });
    }
    let k = nearest_sample_index(s, grid.len())?;
    Ok(model.rho(s - grid.positions()[k]) * recon_at_sensors[k])
}
