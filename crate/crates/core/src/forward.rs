//! Decoupled forward process `x_t = x₀ + H_t + √t ε`.
//!
//! [`sample_xt`] is the closed-form marginal used everywhere in training.
//! [`forward_sde_simulate`] integrates `dx = h_t dt + dw` with Euler–Maruyama
//! and exists to check that the two agree.

use ndarray::Zip;

use crate::attenuation::{big_h, big_h_rows, small_h, Phi};
use crate::error::{DdmError, Result};
use crate::numerics::{ensure_same_shape, gaussian, Matrix, RngStream};

/// A forward draw together with everything used to produce it.
#[derive(Debug, Clone)]
pub struct ForwardSample {
    pub x_t: Matrix,
    pub t: f64,
    pub eps: Matrix,
    pub phi: Phi,
}

impl ForwardSample {
    pub fn draw(x0: &Matrix, phi: Phi, t: f64, rng: &mut RngStream) -> Result<Self> {
        let eps = gaussian(rng, x0.rows(), x0.cols())?;
        let x_t = sample_xt(x0, &phi, t, &eps)?;
        Ok(ForwardSample { x_t, t, eps, phi })
    }

    /// Recovers `ε = (x_t − x₀ − H_t) / √t`.
    pub fn recover_eps(&self, x0: &Matrix) -> Result<Matrix> {
        let h = big_h(&self.phi, self.t)?;
        let root_t = self.t.sqrt();
        let out = (self.x_t.array() - x0.array() - h.array()) / root_t;
        Ok(Matrix::from_array_unchecked(out))
    }
}

fn check_shapes(x0: &Matrix, phi: &Phi, eps: &Matrix) -> Result<()> {
    ensure_same_shape(x0, eps)?;
    if phi.rows() != x0.rows() || phi.dim() != x0.cols() {
        return Err(DdmError::Shape(format!(
            "phi for {}x{} does not match x0 {:?}",
            phi.rows(),
            phi.dim(),
            x0.dim()
        )));
    }
    Ok(())
}

/// `x₀ + H_t(φ) + √t ε`.
pub fn sample_xt(x0: &Matrix, phi: &Phi, t: f64, eps: &Matrix) -> Result<Matrix> {
    check_shapes(x0, phi, eps)?;
    let h = big_h(phi, t)?;
    let root_t = t.sqrt();
    let mut out = x0.array() + h.array();
    out.scaled_add(root_t, eps.array());
    Ok(Matrix::from_array_unchecked(out))
}

/// [`sample_xt`] with one time per row.
pub fn sample_xt_rows(x0: &Matrix, phi: &Phi, ts: &[f64], eps: &Matrix) -> Result<Matrix> {
    check_shapes(x0, phi, eps)?;
    let h = big_h_rows(phi, ts)?;
    let mut out = x0.array() + h.array();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let root_t = ts[i].sqrt();
        Zip::from(&mut row)
            .and(eps.row(i))
            .for_each(|o, &e| *o += root_t * e);
    }
    Ok(Matrix::from_array_unchecked(out))
}

/// Euler–Maruyama endpoint of `dx = h_t dt + dw` from `x₀` at `t = 0` to `t = 1`.
pub fn forward_sde_simulate(
    x0: &Matrix,
    phi: &Phi,
    n_steps: usize,
    rng: &mut RngStream,
) -> Result<Matrix> {
    simulate(x0, phi, n_steps, Some(rng))
}

/// Drift-only path (`ξ = 0`), i.e. the attenuation alone.
pub fn forward_drift_simulate(x0: &Matrix, phi: &Phi, n_steps: usize) -> Result<Matrix> {
    simulate(x0, phi, n_steps, None)
}

fn simulate(
    x0: &Matrix,
    phi: &Phi,
    n_steps: usize,
    mut rng: Option<&mut RngStream>,
) -> Result<Matrix> {
    if n_steps < 10 {
        return Err(DdmError::InvalidArgument(format!(
            "forward simulation needs at least 10 steps, got {n_steps}"
        )));
    }
    check_shapes(x0, phi, x0)?;
    let delta = 1.0 / n_steps as f64;
    let root_delta = delta.sqrt();
    let mut x = x0.array().clone();
    for k in 0..n_steps {
        let h = small_h(phi, k as f64 * delta)?;
        x.scaled_add(delta, h.array());
        if let Some(rng) = rng.as_deref_mut() {
            x.mapv_inplace(|v| v + root_delta * rng.normal());
        }
    }
    Ok(Matrix::from_array_unchecked(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attenuation::{solve_phi, AttenuationFamily};
    use crate::numerics::derive_stream;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn constant_phi(x0: &Matrix) -> Phi {
        solve_phi(AttenuationFamily::Constant, x0, &mut derive_stream(0, 0)).unwrap()
    }

    #[test]
    fn noise_free_path_scales_toward_zero() {
        let x0 = m(&[&[2.0]]);
        let phi = constant_phi(&x0);
        let out = sample_xt(&x0, &phi, 0.5, &Matrix::zeros(1, 1)).unwrap();
        assert_eq!(out, m(&[&[1.0]]));
    }

    #[test]
    fn endpoints() {
        let x0 = m(&[&[2.0, -0.5], &[0.1, 3.0]]);
        let phi = constant_phi(&x0);
        let eps = m(&[&[0.3, -1.2], &[0.7, 0.0]]);
        assert_eq!(sample_xt(&x0, &phi, 0.0, &eps).unwrap(), x0);
        assert_eq!(sample_xt(&x0, &phi, 1.0, &eps).unwrap(), eps);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x0 = m(&[&[2.0, 1.0]]);
        let phi = constant_phi(&x0);
        assert!(sample_xt(&x0, &phi, 0.5, &Matrix::zeros(1, 3)).is_err());
        assert!(sample_xt(
            &m(&[&[1.0, 1.0], &[1.0, 1.0]]),
            &phi,
            0.5,
            &Matrix::zeros(2, 2)
        )
        .is_err());
    }

    #[test]
    fn eps_is_recoverable() {
        let mut rng = derive_stream(9, 1);
        let x0 = gaussian(&mut rng, 64, 2).unwrap();
        for fam in [AttenuationFamily::Constant, AttenuationFamily::Linear] {
            let phi = solve_phi(fam, &x0, &mut rng).unwrap();
            for &t in &[1e-3, 0.1, 0.5, 1.0] {
                let s = ForwardSample::draw(&x0, phi.clone(), t, &mut rng).unwrap();
                let back = s.recover_eps(&x0).unwrap();
                let err = (back.into_array() - s.eps.array())
                    .iter()
                    .fold(0.0_f64, |a, v| a.max(v.abs()));
                assert!(err <= 1e-12, "t={t}: {err}");
            }
        }
    }

    #[test]
    fn per_row_times_match_scalar_time() {
        let mut rng = derive_stream(2, 2);
        let x0 = gaussian(&mut rng, 4, 2).unwrap();
        let phi = solve_phi(AttenuationFamily::Linear, &x0, &mut rng).unwrap();
        let eps = gaussian(&mut rng, 4, 2).unwrap();
        let a = sample_xt(&x0, &phi, 0.3, &eps).unwrap();
        let b = sample_xt_rows(&x0, &phi, &[0.3; 4], &eps).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn marginal_moments_match_closed_form() {
        let n = 100_000;
        let x0 = Matrix::from_array(ndarray::Array2::from_shape_fn((n, 2), |(_, j)| {
            [1.5, -0.5][j]
        }))
        .unwrap();
        let phi = constant_phi(&x0);
        let mut rng = derive_stream(31, 0);
        for &t in &[0.1, 0.5, 0.9] {
            let eps = gaussian(&mut rng, n, 2).unwrap();
            let xt = sample_xt(&x0, &phi, t, &eps).unwrap();
            let se = (t / n as f64).sqrt();
            for (j, (mean, var)) in xt.col_mean().into_iter().zip(xt.col_var()).enumerate() {
                let expected = x0[[0, j]] * (1.0 - t);
                assert!(
                    (mean - expected).abs() < 5.0 * se,
                    "t={t} mean {mean} vs {expected}"
                );
                assert!((var - t).abs() < 0.05 * t, "t={t} var {var}");
            }
        }
    }

    #[test]
    fn drift_only_path_reaches_zero() {
        let x0 = m(&[&[2.0]]);
        let phi = constant_phi(&x0);
        let end = forward_drift_simulate(&x0, &phi, 200).unwrap();
        assert!(end[[0, 0]].abs() < 1e-9 + 2.0 / 200.0);
        // Linear drift accumulates O(δ) left-point error.
        let phi = solve_phi(AttenuationFamily::Linear, &x0, &mut derive_stream(1, 0)).unwrap();
        let end = forward_drift_simulate(&x0, &phi, 1000).unwrap();
        assert!(end[[0, 0]].abs() < 10.0 / 1000.0, "{}", end[[0, 0]]);
    }

    #[test]
    fn sde_is_deterministic_and_checks_steps() {
        let x0 = m(&[&[2.0], &[-1.0]]);
        let phi = constant_phi(&x0);
        let a = forward_sde_simulate(&x0, &phi, 50, &mut derive_stream(4, 4)).unwrap();
        let b = forward_sde_simulate(&x0, &phi, 50, &mut derive_stream(4, 4)).unwrap();
        assert_eq!(a, b);
        assert!(forward_sde_simulate(&x0, &phi, 9, &mut derive_stream(4, 4)).is_err());
    }
}
