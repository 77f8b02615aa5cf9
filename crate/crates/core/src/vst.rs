//! Moments of variance-stabilized Poisson variables.
//!
//! Expectations are computed from the Poisson series. Weights are generated
//! from the mode outwards with the recurrence `p_{k+1} = p_k * lambda / (k+1)`
//! and normalized at the end, so no factorial or `exp(-lambda)` is ever
//! formed explicitly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;

/// Truncate once the estimated neglected mass drops below this.
pub const TAIL_MASS: f64 = 1e-14;
/// Largest Poisson mean accepted by [`optimal_shift`].
pub const LAMBDA_MAX: f64 = 1e4;
/// Bisection bracket for the shift parameter.
pub const SHIFT_BRACKET: (f64, f64) = (0.0, 2.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VstError {
    #[error("Poisson mean must be finite and >= 0, got {0}")]
    BadLambda(f64),
    #[error("lambda = {lambda} outside (0, {max}]")]
    LambdaOutOfRange { lambda: f64, max: f64 },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("no root in range: V(sqrt(X + c)) - 1/4 has no sign change on [{lo}, {hi}] (values {f_lo:.3e}, {f_hi:.3e})")]
    NoRoot { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },
    #[error("variance not monotone in c near c = {at}")]
    NotMonotone { at: f64 },
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Sqrt,
    ShiftedSqrt { c: f64 },
    /// `sqrt(x + 3/8)`.
    Anscombe,
    /// `(sqrt(x) + sqrt(x + 1)) / 2`.
    TukeyFreeman,
    /// `(sqrt(x + c1) + sqrt(x + c2)) / 2`.
    Averaging { c1: f64, c2: f64 },
}

impl Transform {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Transform::Sqrt => x.sqrt(),
            Transform::ShiftedSqrt { c } => (x + c).sqrt(),
            Transform::Anscombe => (x + 0.375).sqrt(),
            Transform::TukeyFreeman => 0.5 * (x.sqrt() + (x + 1.0).sqrt()),
            Transform::Averaging { c1, c2 } => 0.5 * ((x + c1).sqrt() + (x + c2).sqrt()),
        }
    }

    pub fn validate(&self) -> Result<(), VstError> {
        let ok = match *self {
            Transform::ShiftedSqrt { c } => c >= 0.0 && c.is_finite(),
            Transform::Averaging { c1, c2 } => c1 >= 0.0 && c2 >= 0.0 && c1.is_finite() && c2.is_finite(),
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(VstError::InvalidTransform(format!("{self} needs nonnegative shifts")))
        }
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Sqrt => write!(f, "sqrt"),
            Transform::ShiftedSqrt { c } => write!(f, "shifted_sqrt:{c}"),
            Transform::Anscombe => write!(f, "anscombe"),
            Transform::TukeyFreeman => write!(f, "tukey_freeman"),
            Transform::Averaging { c1, c2 } => write!(f, "averaging:{c1}:{c2}"),
        }
    }
}

/// Parses `sqrt`, `anscombe`, `tukey_freeman`, `shifted_sqrt:<c>` and
/// `averaging:<c1>:<c2>`.
impl FromStr for Transform {
    type Err = VstError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| {
            p.parse::<f64>()
                .map_err(|_| VstError::InvalidTransform(format!("bad number {p:?} in {s:?}")))
        };
        let t = match parts.as_slice() {
            ["sqrt"] => Transform::Sqrt,
            ["anscombe"] => Transform::Anscombe,
            ["tukey_freeman"] => Transform::TukeyFreeman,
            ["shifted_sqrt", c] => Transform::ShiftedSqrt { c: num(c)? },
            ["averaging", c1, c2] => Transform::Averaging {
                c1: num(c1)?,
                c2: num(c2)?,
            },
            _ => return Err(VstError::InvalidTransform(format!("unknown transform {s:?}"))),
        };
        t.validate()?;
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub lambda: f64,
    pub mean: f64,
    pub variance: f64,
    /// Largest `k` included in the series.
    pub truncation_k: u64,
    /// Estimated pmf mass outside the summed window.
    pub tail_mass: f64,
}

fn check_lambda(lambda: f64) -> Result<(), VstError> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(VstError::BadLambda(lambda))
    }
}

/// Unnormalized Poisson weights over `lo..=hi`, scaled so the mode has weight 1.
fn weights(lambda: f64, lo: u64, hi: u64) -> Vec<f64> {
    let mode = (lambda.floor() as u64).clamp(lo, hi);
    let mut w = vec![0.0; (hi - lo + 1) as usize];
    let idx = |k: u64| (k - lo) as usize;
    w[idx(mode)] = 1.0;
    for k in (lo..mode).rev() {
        w[idx(k)] = w[idx(k + 1)] * (k + 1) as f64 / lambda;
    }
    for k in mode + 1..=hi {
        w[idx(k)] = w[idx(k - 1)] * lambda / k as f64;
    }
    w
}

/// Mean and variance of `t(X)` for `X ~ Poisson(lambda)` summed over the
/// explicit window `lo..=hi`. The window is renormalized to unit mass.
pub fn moments_over(t: &Transform, lambda: f64, lo: u64, hi: u64) -> Result<MomentReport, VstError> {
    check_lambda(lambda)?;
    t.validate()?;
    if lambda == 0.0 {
        return Ok(degenerate(t));
    }
    let hi = hi.max(lo);
    let w = weights(lambda, lo, hi);
    let total: f64 = w.iter().sum();
    let values: Vec<f64> = (lo..=hi).map(|k| t.apply(k as f64)).collect();
    let mean = w.iter().zip(&values).map(|(p, f)| p * f).sum::<f64>() / total;
    let variance = w
        .iter()
        .zip(&values)
        .map(|(p, f)| p * (f - mean) * (f - mean))
        .sum::<f64>()
        / total;
    Ok(MomentReport {
        lambda,
        mean,
        variance,
        truncation_k: hi,
        tail_mass: tail_estimate(lambda, lo, hi, &w) / total,
    })
}

fn degenerate(t: &Transform) -> MomentReport {
    MomentReport {
        lambda: 0.0,
        mean: t.apply(0.0),
        variance: 0.0,
        truncation_k: 0,
        tail_mass: 0.0,
    }
}

/// Geometric upper bounds on the neglected mass on both sides of the window.
fn tail_estimate(lambda: f64, lo: u64, hi: u64, w: &[f64]) -> f64 {
    let next = w[w.len() - 1] * lambda / (hi + 1) as f64;
    let ratio_up = lambda / (hi + 2) as f64;
    let upper = if ratio_up < 1.0 {
        next / (1.0 - ratio_up)
    } else {
        f64::INFINITY
    };
    let lower = if lo == 0 {
        0.0
    } else {
        let prev = w[0] * lo as f64 / lambda;
        let ratio_down = (lo - 1) as f64 / lambda;
        if ratio_down < 1.0 {
            prev / (1.0 - ratio_down)
        } else {
            f64::INFINITY
        }
    };
    upper + lower
}

/// Smallest window around the mode whose neglected mass is below `tail`.
fn window(lambda: f64, tail: f64) -> (u64, u64) {
    let mode = lambda.floor() as u64;
    let mut lo = mode;
    let mut hi = mode;
    let mut w_lo = 1.0f64;
    let mut w_hi = 1.0f64;
    let mut total = 1.0f64;
    loop {
        let next_up = w_hi * lambda / (hi + 1) as f64;
        let ratio_up = lambda / (hi + 2) as f64;
        let upper = if ratio_up < 1.0 { next_up / (1.0 - ratio_up) } else { f64::INFINITY };
        let lower = if lo == 0 {
            0.0
        } else {
            let prev = w_lo * lo as f64 / lambda;
            let ratio_down = (lo - 1) as f64 / lambda;
            if ratio_down < 1.0 { prev / (1.0 - ratio_down) } else { f64::INFINITY }
        };
        if upper + lower <= tail * total {
            return (lo, hi);
        }
        if upper >= lower {
            hi += 1;
            w_hi = next_up;
            total += w_hi;
        } else {
            w_lo *= lo as f64 / lambda;
            lo -= 1;
            total += w_lo;
        }
    }
}

/// Mean and variance of `t(X)`, `X ~ Poisson(lambda)`, truncated at tail
/// mass [`TAIL_MASS`]. `lambda = 0` gives the point mass at zero.
pub fn transformed_moments(t: &Transform, lambda: f64) -> Result<MomentReport, VstError> {
    check_lambda(lambda)?;
    if lambda == 0.0 {
        t.validate()?;
        return Ok(degenerate(t));
    }
    let (lo, hi) = window(lambda, TAIL_MASS);
    moments_over(t, lambda, lo, hi)
}

/// Second-order expansion of `V(sqrt(X + c))` for large `lambda`.
pub fn anscombe_expansion(c: f64, lambda: f64) -> f64 {
    0.25 * (1.0 + (0.375 - c) / lambda + (32.0 * c * c - 52.0 * c + 17.0) / (32.0 * lambda * lambda))
}

fn shifted_variance(lambda: f64, c: f64) -> Result<f64, VstError> {
    Ok(transformed_moments(&Transform::ShiftedSqrt { c }, lambda)?.variance)
}

/// Shift `c` with `V(sqrt(X + c)) = 1/4` for `X ~ Poisson(lambda)`, by
/// bisection over [`SHIFT_BRACKET`].
pub fn optimal_shift(lambda: f64, tol: f64) -> Result<f64, VstError> {
    if !(lambda > 0.0 && lambda <= LAMBDA_MAX) {
        return Err(VstError::LambdaOutOfRange {
            lambda,
            max: LAMBDA_MAX,
        });
    }
    if !(tol > 0.0) {
        return Err(VstError::BadTolerance(tol));
    }
    let (mut lo, mut hi) = SHIFT_BRACKET;
    let mut v_lo = shifted_variance(lambda, lo)?;
    let mut v_hi = shifted_variance(lambda, hi)?;
    if !(v_lo - 0.25 >= 0.0 && v_hi - 0.25 <= 0.0) {
        return Err(VstError::NoRoot {
            lo,
            hi,
            f_lo: v_lo - 0.25,
            f_hi: v_hi - 0.25,
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v_mid = shifted_variance(lambda, mid)?;
        if !(v_lo >= v_mid && v_mid >= v_hi) {
            return Err(VstError::NotMonotone { at: mid });
        }
        if (v_mid - 0.25).abs() <= tol || hi - lo <= f64::EPSILON * 4.0 {
            return Ok(mid);
        }
        if v_mid > 0.25 {
            lo = mid;
            v_lo = v_mid;
        } else {
            hi = mid;
            v_hi = v_mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Moments of `t` at every point of `grid`.
pub fn variance_curve(t: &Transform, grid: &[f64]) -> Result<Vec<MomentReport>, VstError> {
    Execution::default()
        .map_indexed(grid.len(), |i| transformed_moments(t, grid[i]))
        .into_iter()
        .collect()
}
