//! Dense matrices and reproducible random streams.
//!
//! Every random draw in the crate goes through an [`RngStream`]. A stream is
//! identified by `(seed, stream_id)`; parallel code derives one stream per
//! unit of work so results never depend on how work is scheduled.

use std::ops::Deref;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{DdmError, Result};

/// Row-major batch of `rows` samples with `cols` coordinates each.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix(Array2<f64>);

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix(Array2::zeros((rows, cols)))
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DdmError::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        let m = Array2::from_shape_vec((rows, cols), data).expect("length checked");
        Self::from_array(m)
    }

    /// Wraps an array, rejecting non-finite entries.
    pub fn from_array(a: Array2<f64>) -> Result<Self> {
        if let Some(pos) = a.iter().position(|v| !v.is_finite()) {
            return Err(DdmError::NonFinite(format!(
                "matrix entry {} (row {}) is not finite",
                pos,
                pos / a.ncols().max(1)
            )));
        }
        Ok(Matrix(a.as_standard_layout().into_owned()))
    }

    /// Wraps an array produced by arithmetic on finite inputs.
    pub(crate) fn from_array_unchecked(a: Array2<f64>) -> Self {
        Matrix(a)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(DdmError::Shape("ragged rows".into()));
        }
        Self::from_vec(n, d, rows.iter().flatten().copied().collect())
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("standard layout")
    }

    pub fn row_vec(&self, i: usize) -> Vec<f64> {
        self.0.row(i).to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Mean of `(self - other)^2` over all entries.
    pub fn mse(&self, other: &Matrix) -> Result<f64> {
        ensure_same_shape(self, other)?;
        let n = self.0.len().max(1) as f64;
        Ok(self
            .0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    /// Column means.
    pub fn col_mean(&self) -> Vec<f64> {
        let n = self.rows() as f64;
        (0..self.cols())
            .map(|j| self.0.column(j).sum() / n)
            .collect()
    }

    /// Unbiased column variances.
    pub fn col_var(&self) -> Vec<f64> {
        let mean = self.col_mean();
        let n = self.rows() as f64;
        (0..self.cols())
            .map(|j| {
                self.0
                    .column(j)
                    .iter()
                    .map(|v| (v - mean[j]).powi(2))
                    .sum::<f64>()
                    / (n - 1.0)
            })
            .collect()
    }

    /// Stacks row blocks vertically.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|m| m.0.view()).collect();
        let a = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| DdmError::Shape(e.to_string()))?;
        Ok(Matrix(a))
    }

    /// Copies rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix(self.0.slice(ndarray::s![start..end, ..]).to_owned())
    }
}

impl Deref for Matrix {
    type Target = Array2<f64>;

    fn deref(&self) -> &Array2<f64> {
        &self.0
    }
}

pub(crate) fn ensure_same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(DdmError::Shape(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// One step of the splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic xoshiro256++ stream keyed by `(seed, stream_id)`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: Xoshiro256PlusPlus,
}

/// Derives the stream `(seed, stream_id)`.
///
/// The pair is hashed through two rounds of splitmix64 and the result seeds
/// xoshiro256++ (whose own seeding expands it with splitmix64 again).
pub fn derive_stream(seed: u64, stream_id: u64) -> RngStream {
    let key = splitmix64(splitmix64(seed) ^ stream_id.rotate_left(32) ^ 0xD1B5_4A32_D192_ED03);
    RngStream {
        seed,
        stream_id,
        rng: Xoshiro256PlusPlus::seed_from_u64(key),
    }
}

impl RngStream {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream; children of distinct `(self, child_id)` pairs are independent.
    pub fn child(&self, child_id: u64) -> RngStream {
        derive_stream(splitmix64(self.seed ^ splitmix64(self.stream_id)), child_id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

/// `n x d` matrix of i.i.d. standard normal draws.
pub fn gaussian(rng: &mut RngStream, n: usize, d: usize) -> Result<Matrix> {
    if n == 0 || d == 0 {
        return Err(DdmError::InvalidArgument(format!(
            "gaussian batch must be non-empty, got {n}x{d}"
        )));
    }
    let data: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    Ok(Matrix(
        Array2::from_shape_vec((n, d), data).expect("length matches"),
    ))
}
