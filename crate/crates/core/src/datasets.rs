//! Deterministic 2-D toy distributions.
//!
//! Generation is a pure function of the [`DatasetSpec`]. Two moons and the
//! swiss roll are rescaled by fixed constants (not by the sample) so that
//! the population has roughly zero mean and unit scale.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DdmError, Result};
use crate::numerics::{derive_stream, Matrix};
use crate::oracle::GaussianMixture;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Gmm,
    TwoMoons,
    #[serde(rename = "swiss_roll_2d")]
    SwissRoll2d,
    Checkerboard,
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetName::Gmm => "gmm",
            DatasetName::TwoMoons => "two_moons",
            DatasetName::SwissRoll2d => "swiss_roll_2d",
            DatasetName::Checkerboard => "checkerboard",
        })
    }
}

impl FromStr for DatasetName {
    type Err = DdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm" => Ok(DatasetName::Gmm),
            "two_moons" => Ok(DatasetName::TwoMoons),
            "swiss_roll_2d" => Ok(DatasetName::SwissRoll2d),
            "checkerboard" => Ok(DatasetName::Checkerboard),
            other => Err(DdmError::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

/// Optional per-dataset parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetParams {
    /// Gaussian jitter before rescaling (two moons, swiss roll).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    /// Mixture for `gmm`; defaults to [`default_gmm`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<GaussianMixture>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: DatasetParams,
}

impl DatasetSpec {
    pub fn new(name: DatasetName, n: usize, seed: u64) -> Self {
        DatasetSpec {
            name,
            n,
            seed,
            params: DatasetParams::default(),
        }
    }

    /// Same distribution, different size and seed.
    pub fn resampled(&self, n: usize, seed: u64) -> Self {
        DatasetSpec {
            n,
            seed,
            ..self.clone()
        }
    }

    pub fn mixture(&self) -> Result<GaussianMixture> {
        match &self.params.mixture {
            Some(m) => {
                m.validate()?;
                Ok(m.clone())
            }
            None => Ok(default_gmm()),
        }
    }
}

/// Two well separated components: `N((−1.5, 0), 0.1 I)` and `N((1.5, 0.5), 0.2 I)`
/// with weights 0.4 / 0.6.
pub fn default_gmm() -> GaussianMixture {
    GaussianMixture::new(
        vec![0.4, 0.6],
        vec![vec![-1.5, 0.0], vec![1.5, 0.5]],
        vec![vec![0.1, 0.1], vec![0.2, 0.2]],
    )
    .expect("valid default mixture")
}

const MOONS_NOISE: f64 = 0.05;
const ROLL_NOISE: f64 = 0.3;
/// Swiss roll divisor: `θ (cos θ, sin θ)` with `θ ∈ [1.5π, 4.5π]` reaches radius 14.1.
const ROLL_SCALE: f64 = 7.0;

pub fn generate(spec: &DatasetSpec) -> Result<Matrix> {
    if spec.n == 0 {
        return Err(DdmError::InvalidArgument(
            "dataset size must be positive".into(),
        ));
    }
    let mut rng = derive_stream(spec.seed, 0xda7a);
    let n = spec.n;
    let mut out = Array2::zeros((n, 2));
    match spec.name {
        DatasetName::Gmm => return spec.mixture()?.sample(n, &mut rng),
        DatasetName::TwoMoons => {
            let noise = spec.params.noise.unwrap_or(MOONS_NOISE);
            // Population moments of the noiseless moons: mean (0.5, 0.25),
            // var_x = 0.75, var_y = 0.5 − 4/π² + (2/π − 0.25)².
            let var_y = 0.5 - 4.0 / (PI * PI) + (2.0 / PI - 0.25).powi(2);
            let sx = (0.75 + noise * noise).sqrt();
            let sy = (var_y + noise * noise).sqrt();
            for mut row in out.rows_mut() {
                let theta = PI * rng.uniform();
                let (x, y) = if rng.uniform() < 0.5 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                row[0] = (x + noise * rng.normal() - 0.5) / sx;
                row[1] = (y + noise * rng.normal() - 0.25) / sy;
            }
        }
        DatasetName::SwissRoll2d => {
            let noise = spec.params.noise.unwrap_or(ROLL_NOISE);
            for mut row in out.rows_mut() {
                let theta = 1.5 * PI * (1.0 + 2.0 * rng.uniform());
                row[0] = (theta * theta.cos() + noise * rng.normal()) / ROLL_SCALE;
                row[1] = (theta * theta.sin() + noise * rng.normal()) / ROLL_SCALE;
            }
        }
        DatasetName::Checkerboard => {
            // 4 x 4 board on [−2, 2]²; cells with even (i + j) are filled.
            for mut row in out.rows_mut() {
                let cell = rng.index(8);
                let i = cell / 2;
                let j = 2 * (cell % 2) + (i % 2);
                row[0] = -2.0 + i as f64 + rng.uniform();
                row[1] = -2.0 + j as f64 + rng.uniform();
            }
        }
    }
    Matrix::from_array(out)
}

/// Whether a point lies in a filled checkerboard cell.
pub fn checkerboard_allowed(x: f64, y: f64) -> bool {
    let i = (x + 2.0).floor() as i64;
    let j = (y + 2.0).floor() as i64;
    (0..4).contains(&i) && (0..4).contains(&j) && (i + j) % 2 == 0
}
