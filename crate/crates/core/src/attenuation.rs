//! Attenuation functions `h_t` that carry a clean sample to zero by `t = 1`.
//!
//! Each family has an analytic integral `H_t = ∫₀ᵗ h_u du`. The per-sample
//! parameters `φ` are chosen so that `x₀ + H₁(φ) = 0`.
//!
//! | family   | `h_t`           | `H_t`                           | `φ`       |
//! |----------|-----------------|---------------------------------|-----------|
//! | constant | `c`             | `c t`                           | `c`       |
//! | linear   | `a t + c`       | `a t²/2 + c t`                  | `a ‖ c`   |
//! | sine     | `sin(a t + c)`  | `(cos c − cos(a t + c)) / a`    | `a ‖ c`   |
//!
//! The sine family can only reach `|x₀| ≤ 2|sin(a/2)/a| ≤ 1`. Coordinates it
//! cannot reach either fail or fall back to a constant slope, encoded as
//! `a = 0` (any `|a| < SINE_CONSTANT_CUTOFF` is read as `h_t = c`).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DdmError, Result};
use crate::numerics::{Matrix, RngStream};

/// Smallest `|a|` the sine solver samples.
pub const SINE_MIN_SLOPE: f64 = 0.1;
/// Below this `|a|` a sine coordinate is evaluated as the constant `h_t = c`.
pub const SINE_CONSTANT_CUTOFF: f64 = 0.05;

/// What the sine solver does when `|x₀|` is out of reach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SineFallback {
    /// Use `h_t = -x₀` for that coordinate.
    Constant,
    /// Report [`DdmError::Unsolvable`].
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AttenuationFamily {
    Constant,
    Linear,
    /// Experimental.
    Sine(SineFallback),
}

impl AttenuationFamily {
    /// Width of `φ` for `d`-dimensional data.
    pub fn phi_dim(self, d: usize) -> usize {
        match self {
            AttenuationFamily::Constant => d,
            AttenuationFamily::Linear | AttenuationFamily::Sine(_) => 2 * d,
        }
    }
}

impl fmt::Display for AttenuationFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttenuationFamily::Constant => "constant",
            AttenuationFamily::Linear => "linear",
            AttenuationFamily::Sine(SineFallback::Constant) => "sine",
            AttenuationFamily::Sine(SineFallback::Error) => "sine-strict",
        })
    }
}

impl FromStr for AttenuationFamily {
    type Err = DdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(AttenuationFamily::Constant),
            "linear" => Ok(AttenuationFamily::Linear),
            "sine" => Ok(AttenuationFamily::Sine(SineFallback::Constant)),
            "sine-strict" => Ok(AttenuationFamily::Sine(SineFallback::Error)),
            other => Err(DdmError::Config(format!(
                "unknown attenuation family {other:?} (expected constant, linear, sine)"
            ))),
        }
    }
}

impl TryFrom<String> for AttenuationFamily {
    type Error = DdmError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AttenuationFamily> for String {
    fn from(f: AttenuationFamily) -> String {
        f.to_string()
    }
}

/// Attenuation parameters for a batch: one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Phi {
    pub family: AttenuationFamily,
    pub params: Matrix,
}

impl Phi {
    pub fn new(family: AttenuationFamily, params: Matrix) -> Result<Self> {
        let width = params.cols();
        let ok = match family {
            AttenuationFamily::Constant => width > 0,
            _ => width > 0 && width.is_multiple_of(2),
        };
        if !ok {
            return Err(DdmError::Shape(format!(
                "{family} parameters cannot have {width} columns"
            )));
        }
        Ok(Phi { family, params })
    }

    pub fn rows(&self) -> usize {
        self.params.rows()
    }

    /// Data dimension `d`.
    pub fn dim(&self) -> usize {
        match self.family {
            AttenuationFamily::Constant => self.params.cols(),
            _ => self.params.cols() / 2,
        }
    }

    /// Returns `(a, c)` for coordinate `j` of row `i` (`a = 0` for constant).
    fn slope_offset(&self, i: usize, j: usize) -> (f64, f64) {
        match self.family {
            AttenuationFamily::Constant => (0.0, self.params[[i, j]]),
            _ => {
                let d = self.dim();
                (self.params[[i, j]], self.params[[i, d + j]])
            }
        }
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(DdmError::TimeOutOfRange { t, range: "[0, 1]" });
    }
    Ok(())
}

fn integral(family: AttenuationFamily, a: f64, c: f64, t: f64) -> f64 {
    match family {
        AttenuationFamily::Constant => c * t,
        AttenuationFamily::Linear => 0.5 * a * t * t + c * t,
        AttenuationFamily::Sine(_) => {
            if a.abs() < SINE_CONSTANT_CUTOFF {
                c * t
            } else {
                (c.cos() - (a * t + c).cos()) / a
            }
        }
    }
}

fn rate(family: AttenuationFamily, a: f64, c: f64, t: f64) -> f64 {
    match family {
        AttenuationFamily::Constant => c,
        AttenuationFamily::Linear => a * t + c,
        AttenuationFamily::Sine(_) => {
            if a.abs() < SINE_CONSTANT_CUTOFF {
                c
            } else {
                (a * t + c).sin()
            }
        }
    }
}

fn map_rows(phi: &Phi, ts: &[f64], f: fn(AttenuationFamily, f64, f64, f64) -> f64) -> Matrix {
    let (n, d) = (phi.rows(), phi.dim());
    let out = Array2::from_shape_fn((n, d), |(i, j)| {
        let (a, c) = phi.slope_offset(i, j);
        f(phi.family, a, c, ts[i])
    });
    Matrix::from_array_unchecked(out)
}

/// `H_t(φ)` at a common time `t`.
pub fn big_h(phi: &Phi, t: f64) -> Result<Matrix> {
    check_time(t)?;
    Ok(map_rows(phi, &vec![t; phi.rows()], integral))
}

/// `H_t(φ)` with a separate time per row.
pub fn big_h_rows(phi: &Phi, ts: &[f64]) -> Result<Matrix> {
    if ts.len() != phi.rows() {
        return Err(DdmError::Shape(format!(
            "{} times for {} rows",
            ts.len(),
            phi.rows()
        )));
    }
    for &t in ts {
        check_time(t)?;
    }
    Ok(map_rows(phi, ts, integral))
}

/// The rate `h_t(φ)`.
pub fn small_h(phi: &Phi, t: f64) -> Result<Matrix> {
    check_time(t)?;
    Ok(map_rows(phi, &vec![t; phi.rows()], rate))
}

/// Clean-sample estimate implied by `φ`: `x̂₀ = −H₁(φ)`.
pub fn x0_from_phi(phi: &Phi) -> Matrix {
    let h1 = map_rows(phi, &vec![1.0; phi.rows()], integral);
    Matrix::from_array_unchecked(-h1.into_array())
}

/// Solves `x₀ + H₁(φ) = 0` row by row.
///
/// Constant is deterministic. Linear and sine draw the slope `a ~ N(0, I)`
/// from `rng` and solve for `c`.
pub fn solve_phi(family: AttenuationFamily, x0: &Matrix, rng: &mut RngStream) -> Result<Phi> {
    if !x0.is_finite() {
        return Err(DdmError::NonFinite("x0 passed to solve_phi".into()));
    }
    let (n, d) = x0.dim();
    let params = match family {
        AttenuationFamily::Constant => x0.array().mapv(|v| -v),
        AttenuationFamily::Linear => {
            let mut p = Array2::zeros((n, 2 * d));
            for i in 0..n {
                for j in 0..d {
                    let a = rng.normal();
                    p[[i, j]] = a;
                    p[[i, d + j]] = -x0[[i, j]] - 0.5 * a;
                }
            }
            p
        }
        AttenuationFamily::Sine(policy) => {
            let mut p = Array2::zeros((n, 2 * d));
            for i in 0..n {
                for j in 0..d {
                    let mut a = rng.normal();
                    if a.abs() < SINE_MIN_SLOPE {
                        a = SINE_MIN_SLOPE.copysign(a);
                    }
                    let target = -x0[[i, j]];
                    match solve_sine_offset(a, target) {
                        Some(c) => {
                            p[[i, j]] = a;
                            p[[i, d + j]] = c;
                        }
                        None => match policy {
                            SineFallback::Constant => {
                                p[[i, j]] = 0.0;
                                p[[i, d + j]] = target;
                            }
                            SineFallback::Error => {
                                return Err(DdmError::Unsolvable {
                                    coord: j,
                                    target,
                                    slope: a,
                                })
                            }
                        },
                    }
                }
            }
            p
        }
    };
    Phi::new(family, Matrix::from_array_unchecked(params))
}

/// Finds `c` with `(cos c − cos(a + c)) / a = target`, or `None` when out of reach.
///
/// `H₁ = A sin(c + a/2)` with `A = 2 sin(a/2) / a`; bisection runs on the
/// branch where `c + a/2 ∈ [−π/2, π/2]`, where `H₁` is monotone.
fn solve_sine_offset(a: f64, target: f64) -> Option<f64> {
    let amplitude = 2.0 * (0.5 * a).sin() / a;
    if target.abs() > amplitude.abs() {
        return None;
    }
    let f = |c: f64| (c.cos() - (a + c).cos()) / a - target;
    let (mut lo, mut hi) = (-0.5 * PI - 0.5 * a, 0.5 * PI - 0.5 * a);
    let increasing = amplitude > 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let below = f(mid) < 0.0;
        if below == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    // Represent c in (−π, π]; H depends on c only through cos/sin.
    let wrapped = c - 2.0 * PI * ((c + PI) / (2.0 * PI)).floor();
    Some(if wrapped <= -PI {
        wrapped + 2.0 * PI
    } else {
        wrapped
    })
}
