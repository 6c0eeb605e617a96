//! Linear MMSE estimation of the sensor samples through the additive test
//! channel `U = X + Z`, `Z ~ N(0, p I)`.
//!
//! All solves go through the cached eigendecomposition of the covariance:
//! with `sigma = V diag(l) V^T`, the estimator is `V diag(l / (l + p)) V^T u`
//! and the error covariance is `V diag(l p / (l + p)) V^T`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{CorrelationModel, CovariancePack};

/// Additive white Gaussian test channel over the sensor samples.
#[derive(Debug, Clone, Copy)]
pub struct TestChannel<'a> {
    p: f64,
    cov: &'a CovariancePack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmseResult {
    pub per_sample_mse: Vec<f64>,
    pub avg_mse: f64,
}

impl<'a> TestChannel<'a> {
    pub fn new(cov: &'a CovariancePack, p: f64) -> Result<Self> {
        if !(p.is_finite() && p >= 0.0) {
            return Err(Error::param("p", format!("noise variance must be finite and >= 0, got {p}")));
        }
        Ok(Self { p, cov })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn cov(&self) -> &'a CovariancePack {
        self.cov
    }

    /// `sigma (sigma + p I)^{-1}`, the matrix applied to the channel output.
    pub fn gain_matrix(&self) -> Result<DMatrix<f64>> {
        let p = self.p;
        if p == 0.0 && self.cov.eigvals().iter().any(|&l| l <= 0.0) {
            return Err(Error::Conditioning(
                "sigma is singular and the channel is noiseless; raise the clamp floor or use p > 0".into(),
            ));
        }
        Ok(self.cov.spectral_map(|l| l / (l + p)))
    }

    /// Linear MMSE estimate of the sensor samples from the channel output `u`.
    pub fn mmse_estimate(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.cov.n() {
            return Err(Error::DimensionMismatch {
                expected: self.cov.n(),
                got: u.len(),
            });
        }
        let gain = self.gain_matrix()?;
        Ok((gain * DVector::from_column_slice(u)).iter().copied().collect())
    }

    /// Diagonal of the estimation-error covariance and its mean.
    pub fn mmse_error(&self) -> MmseResult {
        let v = self.cov.eigvecs();
        let err: Vec<f64> = self
            .cov
            .eigvals()
            .iter()
            .map(|&l| mode_error(l, self.p))
            .collect();
        let per_sample_mse: Vec<f64> = v
            .row_iter()
            .map(|row| {
                row.iter()
                    .zip(&err)
                    .map(|(vij, e)| vij * vij * e)
                    .sum::<f64>()
                    .clamp(0.0, 1.0)
            })
            .collect();
        let avg_mse = per_sample_mse.iter().sum::<f64>() / per_sample_mse.len() as f64;
        MmseResult {
            per_sample_mse,
            avg_mse,
        }
    }
}

/// Error variance of one eigenmode: `l p / (l + p)`.
#[inline]
fn mode_error(l: f64, p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        l * p / (l + p)
    }
}

/// Average per-sample MMSE at noise level `p`.
///
/// Equals `mmse_error().avg_mse` up to rounding: the trace of
/// `V diag(e) V^T` is `sum(e)` because `V` is orthonormal.
pub fn average_mse(cov: &CovariancePack, p: f64) -> f64 {
    let n = cov.n() as f64;
    cov.eigvals().iter().map(|&l| mode_error(l, p)).sum::<f64>() / n
}

/// MSE bound of the scaled-average estimator that averages the `N theta`
/// neighbouring noisy samples with weight `rho(theta) / (N theta + p)`:
///
/// `1 - rho(theta)^2 / (1 + p / (N theta)) * (1 - 2 / (N theta))`.
pub fn averaging_estimator_mse_bound(
    model: &CorrelationModel,
    n: usize,
    theta: f64,
    p: f64,
) -> Result<f64> {
    let n_theta = n as f64 * theta;
    if !(n_theta > 2.0) {
        return Err(Error::Precondition(format!(
            "N * theta = {n_theta} must exceed 2 for the bound to be informative"
        )));
    }
    if theta > model.theta_mono() {
        return Err(Error::Precondition(format!(
            "theta = {theta} exceeds the monotone radius {}",
            model.theta_mono()
        )));
    }
    if !(p.is_finite() && p >= 0.0) {
        return Err(Error::param("p", format!("must be finite and >= 0, got {p}")));
    }
    let r = model.rho(theta);
    if !(r > 0.0) {
        return Err(Error::Precondition(format!("rho(theta) = {r} must be positive")));
    }
    Ok(1.0 - r * r / (1.0 + p / n_theta) * (1.0 - 2.0 / n_theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{covariance_matrix, sensor_positions, DEFAULT_CLAMP_FLOOR};

    fn identity_pack(n: usize) -> CovariancePack {
        CovariancePack::from_matrix(DMatrix::identity(n, n), 0.0).unwrap()
    }

    fn exp_pack(n: usize) -> CovariancePack {
        covariance_matrix(
            &CorrelationModel::exp_markov(),
            &sensor_positions(n).unwrap(),
            DEFAULT_CLAMP_FLOOR,
        )
        .unwrap()
    }

    #[test]
    fn estimate_examples() {
        let cov = exp_pack(5);
        let u = [0.3, -1.2, 0.8, 2.0, -0.4];
        let noiseless = TestChannel::new(&cov, 0.0).unwrap().mmse_estimate(&u).unwrap();
        for (a, b) in noiseless.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }

        let id = identity_pack(3);
        let half = TestChannel::new(&id, 1.0).unwrap().mmse_estimate(&[2.0, -4.0, 1.0]).unwrap();
        assert_eq!(half, vec![1.0, -2.0, 0.5]);

        let zero = TestChannel::new(&cov, 0.7).unwrap().mmse_estimate(&[0.0; 5]).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));

        assert!(TestChannel::new(&cov, 0.7).unwrap().mmse_estimate(&[0.0; 4]).is_err());
        assert!(TestChannel::new(&cov, -1.0).is_err());
    }

    #[test]
    fn singular_noiseless_channel_is_rejected() {
        let sigma = DMatrix::from_element(2, 2, 1.0);
        let cov = CovariancePack::from_matrix(sigma, 0.0).unwrap();
        let err = TestChannel::new(&cov, 0.0).unwrap().mmse_estimate(&[1.0, 1.0]);
        // the zero eigenvalue may come back as a tiny negative or exactly 0
        if cov.eigvals().iter().any(|&l| l <= 0.0) {
            assert!(matches!(err, Err(Error::Conditioning(_))));
        }
    }

    #[test]
    fn error_examples() {
        let cov = exp_pack(8);
        assert!(TestChannel::new(&cov, 0.0).unwrap().mmse_error().avg_mse <= 1e-8);

        let id = identity_pack(4);
        let r = TestChannel::new(&id, 3.0).unwrap().mmse_error();
        for e in &r.per_sample_mse {
            assert!((e - 0.75).abs() < 1e-15);
        }

        // 2x2 closed form: mse = 1 - [1, a] (sigma + I)^{-1} [1, a]^T = 1 - 2 / (4 - a^2)
        let a = (-0.5f64).exp();
        let closed = 1.0 - 2.0 / (4.0 - a * a);
        let r = TestChannel::new(&exp_pack(2), 1.0).unwrap().mmse_error();
        assert!((r.avg_mse - closed).abs() < 1e-14);
        assert!((r.avg_mse - 0.449357).abs() < 1e-6);
        assert!((average_mse(&exp_pack(2), 1.0) - closed).abs() < 1e-14);
    }

    #[test]
    fn error_tends_to_one() {
        let cov = exp_pack(6);
        let big = TestChannel::new(&cov, 1e9).unwrap().mmse_error().avg_mse;
        assert!((1.0 - big).abs() < 1e-8);
    }

    #[test]
    fn averaging_bound_examples() {
        let exp = CorrelationModel::exp_markov();
        let v = averaging_estimator_mse_bound(&exp, 100, 0.2, 4.0).unwrap();
        let direct = 1.0 - ((-0.4f64).exp() / 1.2) * 0.9;
        assert!((v - direct).abs() < 1e-15);
        assert!((v - 0.497260).abs() < 1e-6);

        // p = 0 and N -> infinity recovers 1 - rho(theta)^2
        let lim = averaging_estimator_mse_bound(&exp, 100_000_000, 0.2, 0.0).unwrap();
        assert!((lim - (1.0 - (-0.4f64).exp())).abs() < 1e-6);

        assert!(averaging_estimator_mse_bound(&exp, 10, 0.2, 1.0).is_err());
        assert!(averaging_estimator_mse_bound(&exp, 100, 1.5, 1.0).is_err());
    }
}
