//! Bayes-optimal denoiser for diagonal Gaussian-mixture data.
//!
//! Under the constant family `x_t = (1 − t) x₀ + √t ε`, so each mixture
//! component stays Gaussian after corruption and `E[x₀ | x_t]` has a closed
//! form. The oracle returns `φ* = −E[x₀ | x_t]` and the matching
//! `ε* = (x_t − (1 − t) E[x₀ | x_t]) / √t`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attenuation::{AttenuationFamily, Phi};
use crate::error::{DdmError, Result};
use crate::numerics::{Matrix, RngStream};
use crate::sampler::{Denoiser, DenoiserOutput};

/// Smallest time the oracle accepts.
pub const ORACLE_MIN_T: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Per-coordinate variances of each component.
    pub variances: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let g = GaussianMixture {
            weights,
            means,
            variances,
        };
        g.validate()?;
        Ok(g)
    }

    /// Single isotropic component `N(mean, var I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(vec![1.0], vec![mean], vec![vec![var; d]])
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(DdmError::Config(
                "mixture needs matching non-empty weights, means and variances".into(),
            ));
        }
        let d = self.means[0].len();
        if d == 0
            || self.means.iter().any(|m| m.len() != d)
            || self.variances.iter().any(|v| v.len() != d)
        {
            return Err(DdmError::Config(
                "mixture component dimensions disagree".into(),
            ));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(DdmError::Config(
                "mixture weights must be non-negative".into(),
            ));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(DdmError::Config(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        if self
            .variances
            .iter()
            .flatten()
            .any(|&v| !(v > 0.0) || !v.is_finite())
        {
            return Err(DdmError::Config(
                "mixture variances must be positive".into(),
            ));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DdmError::Config("mixture means must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Draws `n` points.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Matrix> {
        if n == 0 {
            return Err(DdmError::InvalidArgument("n must be positive".into()));
        }
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut k = self.n_components() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            for j in 0..d {
                row[j] = self.means[k][j] + self.variances[k][j].sqrt() * rng.normal();
            }
        }
        Matrix::from_array(out)
    }

    /// Component responsibilities `p(k | x_t)`, one row per sample.
    pub fn responsibilities(&self, x_t: &Matrix, t: f64) -> Result<Matrix> {
        self.check(x_t, t)?;
        let (n, d) = x_t.dim();
        let k = self.n_components();
        let keep = 1.0 - t;
        let mut out = Array2::zeros((n, k));
        let mut logp = vec![0.0; k];
        for i in 0..n {
            for c in 0..k {
                let mut lp = self.weights[c].ln();
                for j in 0..d {
                    let var = keep * keep * self.variances[c][j] + t;
                    let diff = x_t[[i, j]] - keep * self.means[c][j];
                    lp -= 0.5 * (diff * diff / var + var.ln() + std::f64::consts::TAU.ln());
                }
                logp[c] = lp;
            }
            let top = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logp.iter().map(|lp| (lp - top).exp()).sum();
            for c in 0..k {
                out[[i, c]] = (logp[c] - top).exp() / z;
            }
        }
        Ok(Matrix::from_array_unchecked(out))
    }

    /// `E[x₀ | x_t]` under the constant-family forward process.
    pub fn posterior_mean(&self, x_t: &Matrix, t: f64) -> Result<Matrix> {
        let resp = self.responsibilities(x_t, t)?;
        let (n, d) = x_t.dim();
        let keep = 1.0 - t;
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            for c in 0..self.n_components() {
                let r = resp[[i, c]];
                if r == 0.0 {
                    continue;
                }
                for j in 0..d {
                    let prior_var = self.variances[c][j];
                    let gain = keep * prior_var / (keep * keep * prior_var + t);
                    let cond = self.means[c][j] + gain * (x_t[[i, j]] - keep * self.means[c][j]);
                    out[[i, j]] += r * cond;
                }
            }
        }
        Ok(Matrix::from_array_unchecked(out))
    }

    /// Bayes-optimal `(φ*, ε*)` for the constant family.
    pub fn oracle_predict(&self, x_t: &Matrix, t: f64) -> Result<DenoiserOutput> {
        let e_x0 = self.posterior_mean(x_t, t)?;
        let keep = 1.0 - t;
        let eps = (x_t.array() - &(e_x0.array() * keep)) / t.sqrt();
        let phi = Matrix::from_array_unchecked(e_x0.array().mapv(|v| -v));
        Ok(DenoiserOutput {
            phi: Phi::new(AttenuationFamily::Constant, phi)?,
            eps: Matrix::from_array_unchecked(eps),
        })
    }

    fn check(&self, x_t: &Matrix, t: f64) -> Result<()> {
        if !(ORACLE_MIN_T..=1.0).contains(&t) {
            return Err(DdmError::TimeOutOfRange {
                t,
                range: "[1e-6, 1]",
            });
        }
        if x_t.cols() != self.dim() {
            return Err(DdmError::Shape(format!(
                "mixture is {}-dimensional, input has {} columns",
                self.dim(),
                x_t.cols()
            )));
        }
        Ok(())
    }
}

/// [`Denoiser`] adapter around a mixture.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub gmm: GaussianMixture,
}

impl Denoiser for OracleDenoiser {
    fn dim(&self) -> usize {
        self.gmm.dim()
    }

    fn family(&self) -> AttenuationFamily {
        AttenuationFamily::Constant
    }

    fn predict(&self, x_t: &Matrix, t: f64) -> Result<DenoiserOutput> {
        self.gmm.oracle_predict(x_t, t)
    }
}
