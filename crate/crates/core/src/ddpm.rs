//! Variance-preserving baseline: `x_t = α_t x₀ + β̄_t ε` with a linear rate
//! `β(t)`, trained on `ε` (optionally also on `x₀`) and sampled with
//! Euler–Maruyama on the reverse SDE.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DdmError, Result};
use crate::mlp::{HeadLoss, LossBreakdown};
use crate::numerics::{ensure_same_shape, gaussian, Matrix, RngStream};
use crate::objective::mse_with_grad;
use crate::sampler::{merge_traces, run_blocks, SampleTrace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VpSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for VpSchedule {
    fn default() -> Self {
        VpSchedule {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl VpSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
            return Err(DdmError::InvalidArgument(format!(
                "need 0 < beta_min <= beta_max, got {beta_min}, {beta_max}"
            )));
        }
        Ok(VpSchedule { beta_min, beta_max })
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `∫₀ᵗ β(u) du`.
    pub fn integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    pub fn alpha(&self, t: f64) -> f64 {
        (-0.5 * self.integral(t)).exp()
    }

    /// `√(1 − α_t²)`, computed without cancellation near `t = 0`.
    pub fn bar_beta(&self, t: f64) -> f64 {
        (-(-self.integral(t)).exp_m1()).sqrt()
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DdmError::TimeOutOfRange { t, range: "[0, 1]" });
    }
    Ok(())
}

/// `α_t x₀ + β̄_t ε`.
pub fn vp_marginal(x0: &Matrix, t: f64, eps: &Matrix, sched: &VpSchedule) -> Result<Matrix> {
    check_time(t)?;
    ensure_same_shape(x0, eps)?;
    let mut out = x0.array() * sched.alpha(t);
    out.scaled_add(sched.bar_beta(t), eps.array());
    Ok(Matrix::from_array_unchecked(out))
}

/// [`vp_marginal`] with one time per row.
pub fn vp_marginal_rows(
    x0: &Matrix,
    ts: &[f64],
    eps: &Matrix,
    sched: &VpSchedule,
) -> Result<Matrix> {
    ensure_same_shape(x0, eps)?;
    if ts.len() != x0.rows() {
        return Err(DdmError::Shape(format!(
            "{} times for {} rows",
            ts.len(),
            x0.rows()
        )));
    }
    let mut out = Array2::zeros(x0.raw_dim());
    for (i, &t) in ts.iter().enumerate() {
        check_time(t)?;
        let (a, b) = (sched.alpha(t), sched.bar_beta(t));
        for j in 0..x0.cols() {
            out[[i, j]] = a * x0[[i, j]] + b * eps[[i, j]];
        }
    }
    Ok(Matrix::from_array_unchecked(out))
}

/// Mean squared `ε` error, plus the mean squared `x₀` error when the second
/// head is present.
pub fn ddpm_loss(
    eps_hat: &Matrix,
    eps: &Matrix,
    x0_pair: Option<(&Matrix, &Matrix)>,
) -> Result<f64> {
    let mut total = eps_hat.mse(eps)?;
    if let Some((x0_hat, x0)) = x0_pair {
        total += x0_hat.mse(x0)?;
    }
    Ok(total)
}

/// Training loss of the baseline; reports the `x₀` term as the first part
/// (zero without that head) and the `ε` term as the second.
#[derive(Debug, Clone)]
pub struct DdpmLoss {
    pub eps: Matrix,
    pub x0: Option<Matrix>,
}

impl HeadLoss for DdpmLoss {
    fn evaluate(&self, outputs: &[Array2<f64>]) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
        let expected = if self.x0.is_some() { 2 } else { 1 };
        if outputs.len() != expected || outputs[0].dim() != self.eps.dim() {
            return Err(DdmError::Shape(format!(
                "baseline loss expects {expected} heads of shape {:?}",
                self.eps.dim()
            )));
        }
        let (eps_loss, eps_grad) = mse_with_grad(&outputs[0], self.eps.array());
        let mut grads = vec![eps_grad];
        let mut x0_loss = 0.0;
        if let Some(x0) = &self.x0 {
            if outputs[1].dim() != x0.dim() {
                return Err(DdmError::Shape("x0 head shape mismatch".into()));
            }
            let (l, g) = mse_with_grad(&outputs[1], x0.array());
            x0_loss = l;
            grads.push(g);
        }
        Ok((
            LossBreakdown {
                total: eps_loss + x0_loss,
                first: x0_loss,
                second: eps_loss,
            },
            grads,
        ))
    }
}

/// One Euler–Maruyama step of the reverse SDE from `t` to `t − s`:
/// `x_t − s [−½β x_t + (β/β̄) ε̂] + √(sβ) ξ`. `noise = None` drops `ξ`.
pub fn em_reverse_step(
    x_t: &Matrix,
    t: f64,
    s: f64,
    eps_hat: &Matrix,
    sched: &VpSchedule,
    noise: Option<&mut RngStream>,
) -> Result<Matrix> {
    if !(s > 0.0 && s <= t && t <= 1.0) {
        return Err(DdmError::InvalidArgument(format!(
            "reverse step needs 0 < s <= t <= 1, got s={s}, t={t}"
        )));
    }
    ensure_same_shape(x_t, eps_hat)?;
    let beta = sched.beta(t);
    let bar = sched.bar_beta(t);
    let mut out = x_t.array() * (1.0 + 0.5 * s * beta);
    out.scaled_add(-s * beta / bar, eps_hat.array());
    if let Some(rng) = noise {
        let xi = gaussian(rng, x_t.rows(), x_t.cols())?;
        out.scaled_add((s * beta).sqrt(), xi.array());
    }
    Ok(Matrix::from_array_unchecked(out))
}

/// Output of a baseline network: `ε̂` and, with the extra head, `x̂₀`.
#[derive(Debug, Clone)]
pub struct VpOutput {
    pub eps: Matrix,
    pub x0: Option<Matrix>,
}

pub trait VpDenoiser: Sync {
    fn dim(&self) -> usize;
    fn predict(&self, x_t: &Matrix, t: f64) -> Result<VpOutput>;
}

/// Evaluation times `1, 1 − h, …, Δt + h` with `h = (1 − Δt)/N`; the last
/// step lands on `Δt` without noise.
pub fn em_points(n_steps: usize, smallest_t: f64) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(DdmError::InvalidArgument("need at least one step".into()));
    }
    if !(smallest_t > 0.0 && smallest_t < 1.0) {
        return Err(DdmError::InvalidArgument(format!(
            "smallest_t {smallest_t} outside (0, 1)"
        )));
    }
    let h = (1.0 - smallest_t) / n_steps as f64;
    Ok((0..n_steps).map(|k| 1.0 - k as f64 * h).collect())
}

fn sample_block<D: VpDenoiser + ?Sized>(
    denoiser: &D,
    sched: &VpSchedule,
    points: &[f64],
    smallest_t: f64,
    rows: usize,
    rng: &mut RngStream,
) -> Result<SampleTrace> {
    let dim = denoiser.dim();
    let mut x = gaussian(rng, rows, dim)?;
    let mut x0_estimates = Vec::with_capacity(points.len());
    for (k, &t) in points.iter().enumerate() {
        let out = denoiser.predict(&x, t)?;
        if !out.eps.is_finite() {
            return Err(DdmError::NonFinite(format!(
                "baseline output at t={t} (step {k})"
            )));
        }
        let x0_hat = match out.x0 {
            Some(x0) => x0,
            None => {
                let mut est = x.array() - &(out.eps.array() * sched.bar_beta(t));
                est /= sched.alpha(t);
                Matrix::from_array_unchecked(est)
            }
        };
        x0_estimates.push((t, x0_hat));
        let next = points.get(k + 1).copied().unwrap_or(smallest_t);
        let last = k + 1 == points.len();
        x = em_reverse_step(
            &x,
            t,
            t - next,
            &out.eps,
            sched,
            if last { None } else { Some(rng) },
        )?;
    }
    Ok(SampleTrace {
        final_samples: x,
        x0_estimates,
        nfe: points.len(),
    })
}

/// `n_steps` uniform Euler–Maruyama steps from `t = 1` to `smallest_t`,
/// one network call each.
pub fn sample_ddpm<D: VpDenoiser + ?Sized>(
    denoiser: &D,
    sched: &VpSchedule,
    n_steps: usize,
    smallest_t: f64,
    n_samples: usize,
    rng: &RngStream,
) -> Result<SampleTrace> {
    if n_samples == 0 {
        return Err(DdmError::InvalidArgument(
            "n_samples must be positive".into(),
        ));
    }
    let points = em_points(n_steps, smallest_t)?;
    let blocks = run_blocks(n_samples, rng, |rows, stream| {
        sample_block(denoiser, sched, &points, smallest_t, rows, stream)
    })?;
    merge_traces(blocks)
}
