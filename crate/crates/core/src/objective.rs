//! Two-term training loss `λ₁(t)·d(φ̂, φ) + λ₂(t)·d(ε̂, ε)`.
//!
//! `d` is a per-coordinate mean of `|r|`, `r²`, or both; the batch loss is
//! the mean of the per-row losses. With unit weights and the squared
//! distance this is the plain `‖φ̂ − φ‖² + ‖ε̂ − ε‖²` objective, up to the
//! per-coordinate averaging.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::attenuation::Phi;
use crate::error::{DdmError, Result};
use crate::mlp::{HeadLoss, LossBreakdown};
use crate::numerics::Matrix;
use crate::sampler::DenoiserOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `(1, 1)`
    Unit,
    /// `(1/t, 1/(1−t))`
    Reciprocal,
    /// `(eᵗ, e^{1−t})`
    Exponential,
    /// `((t²−t+1)/t, (t²−t+1)/(1−t)²)`
    Adaptive,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 4] = [
        WeightScheme::Unit,
        WeightScheme::Reciprocal,
        WeightScheme::Exponential,
        WeightScheme::Adaptive,
    ];
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightScheme::Unit => "unit",
            WeightScheme::Reciprocal => "reciprocal",
            WeightScheme::Exponential => "exponential",
            WeightScheme::Adaptive => "adaptive",
        })
    }
}

impl FromStr for WeightScheme {
    type Err = DdmError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| DdmError::Config(format!("unknown weight scheme {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossType {
    L1,
    L2,
    L1PlusL2,
}

impl LossType {
    pub const ALL: [LossType; 3] = [LossType::L1, LossType::L2, LossType::L1PlusL2];

    /// Distance of one residual and its derivative.
    fn eval(self, r: f64) -> (f64, f64) {
        match self {
            LossType::L1 => (r.abs(), sign(r)),
            LossType::L2 => (r * r, 2.0 * r),
            LossType::L1PlusL2 => (r.abs() + r * r, sign(r) + 2.0 * r),
        }
    }
}

fn sign(r: f64) -> f64 {
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl fmt::Display for LossType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossType::L1 => "l1",
            LossType::L2 => "l2",
            LossType::L1PlusL2 => "l1_plus_l2",
        })
    }
}

impl FromStr for LossType {
    type Err = DdmError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| DdmError::Config(format!("unknown loss type {s:?}")))
    }
}

pub const DEFAULT_T_CLIP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub scheme: WeightScheme,
    pub loss_type: LossType,
    pub t_clip: f64,
}

impl LossConfig {
    pub fn new(scheme: WeightScheme, loss_type: LossType, t_clip: f64) -> Result<Self> {
        if !(t_clip > 0.0 && t_clip <= 0.05) {
            return Err(DdmError::Config(format!(
                "t_clip {t_clip} outside (0, 0.05]"
            )));
        }
        Ok(LossConfig {
            scheme,
            loss_type,
            t_clip,
        })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            scheme: WeightScheme::Adaptive,
            loss_type: LossType::L2,
            t_clip: DEFAULT_T_CLIP,
        }
    }
}

/// `(λ₁, λ₂)` at `t`, after clipping `t` into `[t_clip, 1 − t_clip]`.
pub fn weights(scheme: WeightScheme, t: f64, t_clip: f64) -> (f64, f64) {
    let t = t.clamp(t_clip, 1.0 - t_clip);
    match scheme {
        WeightScheme::Unit => (1.0, 1.0),
        WeightScheme::Reciprocal => (1.0 / t, 1.0 / (1.0 - t)),
        WeightScheme::Exponential => (t.exp(), (1.0 - t).exp()),
        WeightScheme::Adaptive => {
            let q = t * t - t + 1.0;
            (q / t, q / ((1.0 - t) * (1.0 - t)))
        }
    }
}

/// Loss and output gradient for one head: mean over rows of
/// `weight_i · mean_j dist(pred_ij − target_ij)`.
fn weighted_term(
    pred: &Array2<f64>,
    target: &Array2<f64>,
    row_weights: &[f64],
    loss_type: LossType,
) -> (f64, f64, Array2<f64>) {
    let (n, d) = pred.dim();
    let scale = 1.0 / (n * d) as f64;
    let mut grad = Array2::zeros((n, d));
    let mut weighted = 0.0;
    let mut plain = 0.0;
    for i in 0..n {
        let w = row_weights[i];
        for j in 0..d {
            let (v, dv) = loss_type.eval(pred[[i, j]] - target[[i, j]]);
            plain += v;
            weighted += w * v;
            grad[[i, j]] = w * dv * scale;
        }
    }
    (weighted * scale, plain * scale, grad)
}

/// Training loss for a batch of `(φ, ε)` targets with per-row times.
#[derive(Debug, Clone)]
pub struct DdmLoss {
    pub phi: Matrix,
    pub eps: Matrix,
    pub ts: Vec<f64>,
    pub cfg: LossConfig,
}

impl DdmLoss {
    fn row_weights(&self) -> (Vec<f64>, Vec<f64>) {
        self.ts
            .iter()
            .map(|&t| weights(self.cfg.scheme, t, self.cfg.t_clip))
            .unzip()
    }

    fn check(&self, outputs: &[Array2<f64>]) -> Result<()> {
        if outputs.len() != 2
            || outputs[0].dim() != self.phi.dim()
            || outputs[1].dim() != self.eps.dim()
            || self.ts.len() != self.phi.rows()
        {
            return Err(DdmError::Shape(format!(
                "loss targets phi {:?}, eps {:?} do not match outputs {:?}",
                self.phi.dim(),
                self.eps.dim(),
                outputs.iter().map(|o| o.dim()).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}

impl HeadLoss for DdmLoss {
    fn evaluate(&self, outputs: &[Array2<f64>]) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
        self.check(outputs)?;
        let (w1, w2) = self.row_weights();
        let (l1, p1, g1) = weighted_term(&outputs[0], self.phi.array(), &w1, self.cfg.loss_type);
        let (l2, p2, g2) = weighted_term(&outputs[1], self.eps.array(), &w2, self.cfg.loss_type);
        Ok((
            LossBreakdown {
                total: l1 + l2,
                first: p1,
                second: p2,
            },
            vec![g1, g2],
        ))
    }
}

/// Loss of a prediction against targets at a common time `t`.
pub fn ddm_loss(
    out: &DenoiserOutput,
    phi: &Phi,
    eps: &Matrix,
    t: f64,
    cfg: &LossConfig,
) -> Result<f64> {
    if out.phi.family != phi.family {
        return Err(DdmError::InvalidArgument(
            "prediction and target use different families".into(),
        ));
    }
    let loss = DdmLoss {
        phi: phi.params.clone(),
        eps: eps.clone(),
        ts: vec![t; eps.rows()],
        cfg: *cfg,
    };
    let (value, _) = loss.evaluate(&[out.phi.params.array().clone(), out.eps.array().clone()])?;
    Ok(value.total)
}

/// Plain mean squared error between two arrays, with its gradient in `pred`.
pub(crate) fn mse_with_grad(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let scale = 1.0 / pred.len().max(1) as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut total = 0.0;
    Zip::from(&mut grad)
        .and(pred)
        .and(target)
        .for_each(|g, &p, &q| {
            let r = p - q;
            total += r * r;
            *g = 2.0 * r * scale;
        });
    (total * scale, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attenuation::AttenuationFamily;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn out(phi: Matrix, eps: Matrix) -> DenoiserOutput {
        DenoiserOutput {
            phi: Phi::new(AttenuationFamily::Constant, phi).unwrap(),
            eps,
        }
    }

    #[test]
    fn weight_examples() {
        for t in [0.01, 0.3, 0.99] {
            assert_eq!(weights(WeightScheme::Unit, t, 1e-3), (1.0, 1.0));
        }
        assert_eq!(weights(WeightScheme::Adaptive, 0.5, 1e-3), (1.5, 3.0));
        assert_eq!(weights(WeightScheme::Reciprocal, 0.5, 1e-3), (2.0, 2.0));
        let (a, b) = weights(WeightScheme::Exponential, 0.25, 1e-3);
        assert_eq!((a, b), (0.25f64.exp(), 0.75f64.exp()));
    }

    #[test]
    fn adaptive_weights_blow_up_at_the_ends() {
        let clip = 1e-3;
        let (l1_lo, l2_lo) = weights(WeightScheme::Adaptive, clip, clip);
        let (l1_hi, l2_hi) = weights(WeightScheme::Adaptive, 1.0 - clip, clip);
        let (l1_mid, l2_mid) = weights(WeightScheme::Adaptive, 0.5, clip);
        assert!(l1_lo > 100.0 * l1_mid);
        assert!(l2_hi > 100.0 * l2_mid);
        assert!(l1_hi < l1_lo && l2_lo < l2_hi);
        // Clipping keeps values finite outside the range.
        assert_eq!(weights(WeightScheme::Adaptive, 0.0, clip), (l1_lo, l2_lo));
    }

    #[test]
    fn loss_examples() {
        let cfg = LossConfig::new(WeightScheme::Unit, LossType::L2, 1e-3).unwrap();
        let target = m(&[&[0.5, -1.0]]);
        let eps = m(&[&[0.2, 0.1]]);
        let phi = Phi::new(AttenuationFamily::Constant, target.clone()).unwrap();
        assert_eq!(
            ddm_loss(&out(target.clone(), eps.clone()), &phi, &eps, 0.4, &cfg).unwrap(),
            0.0
        );

        let off = m(&[&[1.5, -1.0]]);
        assert_eq!(
            ddm_loss(&out(off, eps.clone()), &phi, &eps, 0.4, &cfg).unwrap(),
            0.5
        );

        let small = ddm_loss(
            &out(m(&[&[0.8, -0.9]]), m(&[&[0.0, 0.3]])),
            &phi,
            &eps,
            0.4,
            &cfg,
        )
        .unwrap();
        let big = ddm_loss(
            &out(m(&[&[1.1, -0.8]]), m(&[&[-0.2, 0.5]])),
            &phi,
            &eps,
            0.4,
            &cfg,
        )
        .unwrap();
        assert!((big - 4.0 * small).abs() < 1e-12);
    }

    #[test]
    fn unit_l2_matches_plain_objective_in_one_dimension() {
        let cfg = LossConfig::new(WeightScheme::Unit, LossType::L2, 1e-3).unwrap();
        let loss = DdmLoss {
            phi: m(&[&[1.0], &[-2.0], &[0.5]]),
            eps: m(&[&[0.1], &[0.0], &[-0.3]]),
            ts: vec![0.2, 0.5, 0.9],
            cfg,
        };
        let phi_hat = ndarray::arr2(&[[1.2], [-2.5], [0.0]]);
        let eps_hat = ndarray::arr2(&[[0.0], [0.3], [-0.3]]);
        let (v, _) = loss.evaluate(&[phi_hat.clone(), eps_hat.clone()]).unwrap();
        let plain: f64 = (0..3)
            .map(|i| {
                (phi_hat[[i, 0]] - loss.phi[[i, 0]]).powi(2)
                    + (eps_hat[[i, 0]] - loss.eps[[i, 0]]).powi(2)
            })
            .sum::<f64>()
            / 3.0;
        assert!((v.total - plain).abs() < 1e-15);
    }

    #[test]
    fn loss_is_row_permutation_invariant() {
        let cfg = LossConfig::new(WeightScheme::Adaptive, LossType::L1PlusL2, 1e-3).unwrap();
        let phi = m(&[&[1.0, 0.0], &[-2.0, 1.0], &[0.5, 0.5]]);
        let eps = m(&[&[0.1, 0.2], &[0.0, -1.0], &[-0.3, 0.4]]);
        let ts = vec![0.2, 0.5, 0.9];
        let ph = ndarray::arr2(&[[1.2, 0.1], [-2.5, 0.9], [0.0, 0.4]]);
        let eh = ndarray::arr2(&[[0.0, 0.1], [0.3, -0.7], [-0.3, 0.2]]);
        let a = DdmLoss {
            phi: phi.clone(),
            eps: eps.clone(),
            ts: ts.clone(),
            cfg,
        }
        .evaluate(&[ph.clone(), eh.clone()])
        .unwrap()
        .0;
        let perm = [2, 0, 1];
        let pick =
            |x: &Array2<f64>| ndarray::stack(ndarray::Axis(0), &perm.map(|i| x.row(i))).unwrap();
        let b = DdmLoss {
            phi: Matrix::from_array(pick(phi.array())).unwrap(),
            eps: Matrix::from_array(pick(eps.array())).unwrap(),
            ts: perm.iter().map(|&i| ts[i]).collect(),
            cfg,
        }
        .evaluate(&[pick(&ph), pick(&eh)])
        .unwrap()
        .0;
        assert!((a.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn names_parse() {
        assert_eq!(
            "adaptive".parse::<WeightScheme>().unwrap(),
            WeightScheme::Adaptive
        );
        assert_eq!(
            "l1_plus_l2".parse::<LossType>().unwrap(),
            LossType::L1PlusL2
        );
        assert!("cubic".parse::<LossType>().is_err());
        assert!(LossConfig::new(WeightScheme::Unit, LossType::L2, 0.1).is_err());
        for s in WeightScheme::ALL {
            assert_eq!(s.to_string().parse::<WeightScheme>().unwrap(), s);
        }
        for l in LossType::ALL {
            assert_eq!(l.to_string().parse::<LossType>().unwrap(), l);
        }
    }
}
