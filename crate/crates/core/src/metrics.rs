//! Distances between point clouds, standing in for FID on 2-D data.

use std::fmt;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{DdmError, Result};
use crate::numerics::{gaussian, Matrix, RngStream};

/// Default number of random directions for [`sliced_wasserstein`].
pub const DEFAULT_N_PROJ: usize = 128;

fn check_pair(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(DdmError::InvalidArgument(
            "point sets must be non-empty".into(),
        ));
    }
    if a.cols() != b.cols() {
        return Err(DdmError::Shape(format!(
            "point sets have dims {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    Ok(())
}

/// Random unit directions, one per row.
pub fn random_directions(n_proj: usize, dim: usize, rng: &mut RngStream) -> Result<Matrix> {
    let mut dirs = gaussian(rng, n_proj, dim)?.into_array();
    for mut row in dirs.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    Matrix::from_array(dirs)
}

/// Mean over random unit directions of the squared 1-D 2-Wasserstein distance.
///
/// Sets of different sizes are compared at `min(|A|, |B|)` evenly spaced
/// quantile levels.
pub fn sliced_wasserstein(
    a: &Matrix,
    b: &Matrix,
    n_proj: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    check_pair(a, b)?;
    if n_proj < 16 {
        return Err(DdmError::InvalidArgument(format!(
            "need at least 16 projections, got {n_proj}"
        )));
    }
    let dirs = random_directions(n_proj, a.cols(), rng)?;
    sliced_wasserstein_with(a, b, &dirs)
}

/// [`sliced_wasserstein`] along caller-supplied unit directions.
pub fn sliced_wasserstein_with(a: &Matrix, b: &Matrix, dirs: &Matrix) -> Result<f64> {
    check_pair(a, b)?;
    let pa = a.dot(&dirs.t());
    let pb = b.dot(&dirs.t());
    let m = a.rows().min(b.rows());
    let mut total = 0.0;
    for k in 0..dirs.rows() {
        let qa = quantiles(pa.column(k).to_owned(), m);
        let qb = quantiles(pb.column(k).to_owned(), m);
        total += qa
            .iter()
            .zip(&qb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / m as f64;
    }
    Ok(total / dirs.rows() as f64)
}

fn quantiles(values: Array1<f64>, m: usize) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    (0..m)
        .map(|i| {
            let idx = ((i as f64 + 0.5) * n as f64 / m as f64).floor() as usize;
            v[idx.min(n - 1)]
        })
        .collect()
}

/// Unbiased MMD² with the kernel `exp(−|x − y|² / (2 h²))`.
pub fn mmd_rbf(a: &Matrix, b: &Matrix, bandwidth: f64) -> Result<f64> {
    check_pair(a, b)?;
    if !(bandwidth > 0.0) {
        return Err(DdmError::InvalidArgument(format!(
            "bandwidth {bandwidth} must be positive"
        )));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(DdmError::InvalidArgument(
            "MMD needs at least two points per set".into(),
        ));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| {
        let d2: f64 = x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
        (-gamma * d2).exp()
    };
    let within = |m: &Matrix| {
        let n = m.rows();
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += k(m.row(i), m.row(j));
            }
        }
        2.0 * s / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            cross += k(a.row(i), b.row(j));
        }
    }
    cross /= (a.rows() * b.rows()) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    SlicedWasserstein,
    Mmd,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::SlicedWasserstein => "swd",
            MetricKind::Mmd => "mmd",
        })
    }
}

impl MetricKind {
    pub fn evaluate(self, a: &Matrix, b: &Matrix, rng: &mut RngStream) -> Result<f64> {
        match self {
            MetricKind::SlicedWasserstein => sliced_wasserstein(a, b, DEFAULT_N_PROJ, rng),
            MetricKind::Mmd => mmd_rbf(a, b, 1.0),
        }
    }
}

/// One line of `sweep.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub nfe: usize,
    pub metric_name: String,
    pub value: f64,
}

/// Evaluates `generate(nfe)` against `reference` for every NFE in `nfe_list`.
///
/// Each NFE gets its own child stream of `rng`, so rows do not depend on the
/// order or subset of NFEs requested.
pub fn nfe_sweep<F>(
    mut generate: F,
    reference: &Matrix,
    nfe_list: &[usize],
    metric: MetricKind,
    label: &str,
    rng: &RngStream,
) -> Result<Vec<SweepRow>>
where
    F: FnMut(usize, &RngStream) -> Result<Matrix>,
{
    if nfe_list.is_empty() {
        return Err(DdmError::InvalidArgument("nfe list is empty".into()));
    }
    let metric_name = if label.is_empty() {
        metric.to_string()
    } else {
        format!("{metric}:{label}")
    };
    nfe_list
        .iter()
        .map(|&nfe| {
            let stream = rng.child(nfe as u64);
            let samples = generate(nfe, &stream.child(0))?;
            let value = metric.evaluate(&samples, reference, &mut stream.child(1))?;
            Ok(SweepRow {
                nfe,
                metric_name: metric_name.clone(),
                value,
            })
        })
        .collect()
}

/// CSV text with header `nfe,metric_name,value`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("nfe,metric_name,value\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.nfe, r.metric_name, r.value));
    }
    s
}
