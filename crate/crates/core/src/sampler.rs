//! Few-step generation with the analytic reverse posterior.
//!
//! Given a prediction `(φ̂, ε̂)` at `(x_t, t)`, the reverse transition to
//! `t − s` is Gaussian with
//!
//! ```text
//! mean = x_t + H_{t−s}(φ̂) − H_t(φ̂) − (s / √t) ε̂
//! var  = s (t − s) / t
//! ```
//!
//! for any step `0 < s ≤ t`, so the number of network evaluations is a free
//! choice rather than a discretization constraint.

use rayon::prelude::*;

use crate::attenuation::{big_h, x0_from_phi, AttenuationFamily, Phi};
use crate::error::{DdmError, Result};
use crate::numerics::{gaussian, Matrix, RngStream};

/// Default last step, `Δt`.
pub const DEFAULT_SMALLEST_T: f64 = 1e-3;

/// Rows per independently seeded block when sampling in parallel.
pub const SAMPLE_BLOCK: usize = 256;

/// Prediction of a two-head denoiser at `(x_t, t)`.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub phi: Phi,
    pub eps: Matrix,
}

impl DenoiserOutput {
    pub fn is_finite(&self) -> bool {
        self.phi.params.is_finite() && self.eps.is_finite()
    }
}

/// Anything that maps `(x_t, t)` to `(φ̂, ε̂)`.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;
    fn family(&self) -> AttenuationFamily;
    fn predict(&self, x_t: &Matrix, t: f64) -> Result<DenoiserOutput>;
}

/// Uniform grid `1 = t₁ > … > t_K = Δt`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    n_steps: usize,
    smallest_t: f64,
}

impl StepSchedule {
    pub fn new(n_steps: usize, smallest_t: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(DdmError::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        if !(smallest_t > 0.0 && smallest_t < 1.0) {
            return Err(DdmError::InvalidArgument(format!(
                "smallest time step {smallest_t} must lie in (0, 1)"
            )));
        }
        if n_steps == 1 {
            log::warn!("one-step generation has zero posterior variance and tends to blur samples");
        }
        Ok(StepSchedule {
            n_steps,
            smallest_t,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn smallest_t(&self) -> f64 {
        self.smallest_t
    }

    /// Evaluation times, one per network call.
    pub fn points(&self) -> Vec<f64> {
        if self.n_steps == 1 {
            return vec![1.0];
        }
        let s = (1.0 - self.smallest_t) / (self.n_steps - 1) as f64;
        (0..self.n_steps)
            .map(|k| {
                if k + 1 == self.n_steps {
                    self.smallest_t
                } else {
                    1.0 - k as f64 * s
                }
            })
            .collect()
    }
}

/// Mean and variance of the reverse transition from `t` to `t − s`.
pub fn posterior_params(
    x_t: &Matrix,
    t: f64,
    s: f64,
    phi_hat: &Phi,
    eps_hat: &Matrix,
) -> Result<(Matrix, f64)> {
    if !(s > 0.0 && s <= t && t <= 1.0) {
        return Err(DdmError::InvalidArgument(format!(
            "posterior step needs 0 < s <= t <= 1, got s={s}, t={t}"
        )));
    }
    let target = (t - s).max(0.0);
    let h_now = big_h(phi_hat, t)?;
    let h_next = big_h(phi_hat, target)?;
    let mut mean = x_t.array() + h_next.array() - h_now.array();
    mean.scaled_add(-s / t.sqrt(), eps_hat.array());
    let var = s * target / t;
    Ok((Matrix::from_array_unchecked(mean), var))
}

/// Output of [`sample`].
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub final_samples: Matrix,
    /// `x̂₀ = −H₁(φ̂)` recorded at every evaluation time.
    pub x0_estimates: Vec<(f64, Matrix)>,
    /// Network evaluations per sample.
    pub nfe: usize,
}

/// Runs `f` over fixed-size row blocks, each with its own child stream, and
/// returns the block results in order. Results do not depend on the thread count.
pub(crate) fn run_blocks<T, F>(n_samples: usize, rng: &RngStream, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut RngStream) -> Result<T> + Sync,
{
    let n_blocks = n_samples.div_ceil(SAMPLE_BLOCK);
    (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let rows = SAMPLE_BLOCK.min(n_samples - b * SAMPLE_BLOCK);
            let mut stream = rng.child(b as u64);
            f(rows, &mut stream)
        })
        .collect()
}

/// Merges per-block traces into one.
pub(crate) fn merge_traces(blocks: Vec<SampleTrace>) -> Result<SampleTrace> {
    let nfe = blocks.first().map_or(0, |b| b.nfe);
    if blocks.iter().any(|b| b.nfe != nfe) {
        return Err(DdmError::InvalidArgument("blocks disagree on NFE".into()));
    }
    let finals: Vec<Matrix> = blocks.iter().map(|b| b.final_samples.clone()).collect();
    let n_points = blocks.first().map_or(0, |b| b.x0_estimates.len());
    let mut x0_estimates = Vec::with_capacity(n_points);
    for k in 0..n_points {
        let t = blocks[0].x0_estimates[k].0;
        let parts: Vec<Matrix> = blocks.iter().map(|b| b.x0_estimates[k].1.clone()).collect();
        x0_estimates.push((t, Matrix::vstack(&parts)?));
    }
    Ok(SampleTrace {
        final_samples: Matrix::vstack(&finals)?,
        x0_estimates,
        nfe,
    })
}

fn sample_block<D: Denoiser + ?Sized>(
    denoiser: &D,
    points: &[f64],
    rows: usize,
    dim: usize,
    rng: &mut RngStream,
) -> Result<SampleTrace> {
    let mut x = gaussian(rng, rows, dim)?;
    let mut x0_estimates = Vec::with_capacity(points.len());
    let mut nfe = 0;
    for (k, &t) in points.iter().enumerate() {
        let out = denoiser.predict(&x, t)?;
        nfe += 1;
        if !out.is_finite() {
            return Err(DdmError::NonFinite(format!(
                "denoiser output at t={t} (step {k}) is not finite"
            )));
        }
        x0_estimates.push((t, x0_from_phi(&out.phi)));
        let next = points.get(k + 1).copied().unwrap_or(0.0);
        let (mean, var) = posterior_params(&x, t, t - next, &out.phi, &out.eps)?;
        x = if next > 0.0 && var > 0.0 {
            let noise = gaussian(rng, rows, dim)?;
            let mut m = mean.into_array();
            m.scaled_add(var.sqrt(), noise.array());
            Matrix::from_array_unchecked(m)
        } else {
            mean
        };
    }
    Ok(SampleTrace {
        final_samples: x,
        x0_estimates,
        nfe,
    })
}

/// Generates `n_samples` points from `x₁ ~ N(0, I)` down to `t = 0`.
///
/// Every grid point costs one network call; the final move from `Δt` to `0`
/// uses the posterior mean only.
pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &StepSchedule,
    n_samples: usize,
    dim: usize,
    rng: &RngStream,
) -> Result<SampleTrace> {
    if n_samples == 0 {
        return Err(DdmError::InvalidArgument(
            "n_samples must be positive".into(),
        ));
    }
    if dim != denoiser.dim() {
        return Err(DdmError::Shape(format!(
            "denoiser expects dim {}, sampling dim {dim}",
            denoiser.dim()
        )));
    }
    let points = schedule.points();
    let blocks = run_blocks(n_samples, rng, |rows, stream| {
        sample_block(denoiser, &points, rows, dim, stream)
    })?;
    merge_traces(blocks)
}

/// Per-step MSE between `x̂₀` and `reference` (the final samples when `None`).
pub fn x0_trajectory_error(
    trace: &SampleTrace,
    reference: Option<&Matrix>,
) -> Result<Vec<(f64, f64)>> {
    let reference = reference.unwrap_or(&trace.final_samples);
    trace
        .x0_estimates
        .iter()
        .map(|(t, est)| Ok((*t, est.mse(reference)?)))
        .collect()
}
