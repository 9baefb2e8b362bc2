//! Finite-difference check of the hand-written backward pass.

use crate::attenuation::{solve_phi, AttenuationFamily};
use crate::ddpm::DdpmLoss;
use crate::error::Result;
use crate::mlp::{backprop, Architecture, HeadLoss, HeadVariant, MlpParams};
use crate::numerics::{gaussian, Matrix, RngStream};
use crate::objective::{DdmLoss, LossConfig, LossType, WeightScheme, DEFAULT_T_CLIP};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Smallest denominator in [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub hidden_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub batch: usize,
    /// Entries checked per tensor; `None` checks all of them.
    pub entries_per_tensor: Option<usize>,
    /// Test hook: perturb the analytic gradient of this tensor.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            hidden_width: 256,
            depth: 4,
            time_embed_dim: 16,
            batch: 8,
            entries_per_tensor: Some(6),
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub case: String,
    pub tensors: Vec<TensorReport>,
}

impl CaseReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failing(&self) -> Vec<&TensorReport> {
        self.tensors
            .iter()
            .filter(|t| !(t.max_rel_err < GRADCHECK_TOL))
            .collect()
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Gradients smaller than this cannot be resolved to [`GRADCHECK_TOL`]
/// because of rounding in `L(w ± h)`; they are compared absolutely.
pub fn noise_floor(loss: f64) -> f64 {
    REL_ERR_FLOOR.max(10.0 * f64::EPSILON * loss.abs() / (FD_STEP * GRADCHECK_TOL))
}

/// Compares [`backprop`] against central differences on selected entries.
pub fn check_params(
    params: &MlpParams,
    x: &Matrix,
    ts: &[f64],
    loss: &dyn HeadLoss,
    opts: &GradcheckOptions,
    rng: &mut RngStream,
) -> Result<Vec<TensorReport>> {
    let (value, mut grads) = backprop(params, x, ts, loss)?;
    let floor = noise_floor(value.total);
    let names = params.names();
    if let Some(target) = &opts.corrupt {
        if let Some(k) = names.iter().position(|n| n == target) {
            grads.tensors[k].mapv_inplace(|g| g * 1.01 + 1e-3);
        }
    }
    let eval = |p: &MlpParams| -> Result<f64> {
        let outs = p.forward(x, ts)?;
        Ok(loss.evaluate(&outs)?.0.total)
    };
    let mut probe = params.clone();
    let mut reports = Vec::with_capacity(names.len());
    for (k, name) in names.into_iter().enumerate() {
        let len = params.tensors[k].len();
        let picks: Vec<usize> = match opts.entries_per_tensor {
            Some(m) if m < len => (0..m).map(|_| rng.index(len)).collect(),
            _ => (0..len).collect(),
        };
        let mut worst = 0.0f64;
        for &flat in &picks {
            let cols = params.tensors[k].ncols();
            let at = [flat / cols, flat % cols];
            let orig = params.tensors[k][at];
            probe.tensors[k][at] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe.tensors[k][at] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe.tensors[k][at] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grads.tensors[k][at], numeric, floor));
        }
        reports.push(TensorReport {
            name,
            max_rel_err: worst,
            checked: picks.len(),
        });
    }
    Ok(reports)
}

/// Every head variant against every weight scheme and loss type for the
/// decoupled loss, plus both baseline losses.
pub fn run_suite(opts: &GradcheckOptions, rng: &RngStream) -> Result<Vec<CaseReport>> {
    let dim = 2;
    let mut cases = Vec::new();
    let mut case_id = 0u64;
    for variant in [
        HeadVariant::SharedTrunkLinearHeads,
        HeadVariant::SharedTrunkDeepHeads,
    ] {
        let arch = |heads: Vec<usize>| Architecture {
            input_dim: dim,
            time_embed_dim: opts.time_embed_dim,
            hidden_width: opts.hidden_width,
            depth: opts.depth,
            head_variant: variant,
            head_dims: heads,
        };
        let variant_name = match variant {
            HeadVariant::SharedTrunkLinearHeads => "linear_heads",
            HeadVariant::SharedTrunkDeepHeads => "deep_heads",
        };
        for scheme in WeightScheme::ALL {
            for loss_type in LossType::ALL {
                let mut r = rng.child(case_id);
                case_id += 1;
                let params = MlpParams::init(arch(vec![dim, dim]), &mut r)?;
                let x0 = gaussian(&mut r, opts.batch, dim)?;
                let ts: Vec<f64> = (0..opts.batch).map(|_| r.uniform_in(0.05, 0.95)).collect();
                let eps = gaussian(&mut r, opts.batch, dim)?;
                let phi = solve_phi(AttenuationFamily::Constant, &x0, &mut r)?;
                let x_t = crate::forward::sample_xt_rows(&x0, &phi, &ts, &eps)?;
                let loss = DdmLoss {
                    phi: phi.params,
                    eps,
                    ts: ts.clone(),
                    cfg: LossConfig::new(scheme, loss_type, DEFAULT_T_CLIP)?,
                };
                cases.push(CaseReport {
                    case: format!("ddm/{variant_name}/{scheme}/{loss_type}"),
                    tensors: check_params(&params, &x_t, &ts, &loss, opts, &mut r)?,
                });
            }
        }
        for with_x0 in [false, true] {
            let mut r = rng.child(case_id);
            case_id += 1;
            let heads = if with_x0 { vec![dim, dim] } else { vec![dim] };
            let params = MlpParams::init(arch(heads), &mut r)?;
            let x_t = gaussian(&mut r, opts.batch, dim)?;
            let ts: Vec<f64> = (0..opts.batch).map(|_| r.uniform_in(0.05, 0.95)).collect();
            let loss = DdpmLoss {
                eps: gaussian(&mut r, opts.batch, dim)?,
                x0: if with_x0 {
                    Some(gaussian(&mut r, opts.batch, dim)?)
                } else {
                    None
                },
            };
            let model = if with_x0 { "ddpm_x0head" } else { "ddpm" };
            cases.push(CaseReport {
                case: format!("{model}/{variant_name}"),
                tensors: check_params(&params, &x_t, &ts, &loss, opts, &mut r)?,
            });
        }
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::derive_stream;

    fn small() -> GradcheckOptions {
        GradcheckOptions {
            hidden_width: 8,
            depth: 2,
            time_embed_dim: 4,
            batch: 4,
            entries_per_tensor: Some(200),
            corrupt: None,
        }
    }

    #[test]
    fn small_network_passes() {
        let cases = run_suite(&small(), &derive_stream(0, 0)).unwrap();
        assert_eq!(cases.len(), 2 * (4 * 3 + 2));
        for c in &cases {
            assert!(c.failing().is_empty(), "{}: {:?}", c.case, c.tensors);
        }
    }

    #[test]
    fn every_tensor_reported_once() {
        let cases = run_suite(&small(), &derive_stream(0, 0)).unwrap();
        let deep = cases
            .iter()
            .find(|c| c.case == "ddm/deep_heads/unit/l2")
            .unwrap();
        let names: Vec<&str> = deep.tensors.iter().map(|t| t.name.as_str()).collect();
        let mut unique = names.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), names.len());
        assert_eq!(names.len(), 2 * (2 + 2 * 3));
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut opts = small();
        opts.corrupt = Some("trunk.1.weight".into());
        let cases = run_suite(&opts, &derive_stream(0, 0)).unwrap();
        for c in &cases {
            let bad: Vec<&str> = c.failing().iter().map(|t| t.name.as_str()).collect();
            assert_eq!(bad, vec!["trunk.1.weight"], "{}", c.case);
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
        assert_eq!(noise_floor(0.0), REL_ERR_FLOOR);
        assert!(noise_floor(100.0) > noise_floor(1.0));
    }
}
