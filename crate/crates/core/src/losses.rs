//! Loss functions `L(z) = sum_i l_i(|<a_i, z>|^2)` with their Wirtinger
//! gradients and constant Hessian bounds.
//!
//! For a loss of this form the Wirtinger gradient is
//! `grad L(z) = sum_i l_i'(t_i) <a_i, z> a_i` with `t_i = |<a_i, z>|^2`, and
//! the Hessian quadratic form in direction `(v, conj v)` is bounded by
//! `sup_t (2 t l''(t) + l'(t)) * sum_i |<a_i, v>|^2 * 2`. Each kind below
//! reports that bound as a constant `L` with
//! `(v, conj v)^* H (v, conj v) <= L ||(v, conj v)||^2`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{CVec, LinalgError, MeasurementFrame, PowerIteration};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid loss parameter: {0}")]
    InvalidParameter(String),
    #[error(
        "z outside the loss domain: |<a_i, z>|^2 + c - 1/4 must be positive for sqrt_shift with subtracted quarter (row {row})"
    )]
    DomainViolation { row: usize },
    #[error("no constant global Hessian bound for {0}; use an adaptive (backtracking) step size")]
    NoConstantBound(&'static str),
    #[error("loss evaluated to a non-finite value")]
    NonFinite,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn invalid(msg: impl Into<String>) -> LossError {
    LossError::InvalidParameter(msg.into())
}

/// Target constant `C_i` in the averaging-transform losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Target {
    /// `C_i = sqrt(y_i + c1) + sqrt(y_i + c2)`, using the loss's own shifts.
    #[default]
    Matched,
    /// `C_i = sqrt(y_i + d1) + sqrt(y_i + d2)`.
    Shifts { d1: f64, d2: f64 },
    /// The same `C` for every measurement.
    Constant { value: f64 },
}

impl Target {
    fn value(&self, y: f64, c1: f64, c2: f64) -> f64 {
        match *self {
            Target::Matched => (y + c1).sqrt() + (y + c2).sqrt(),
            Target::Shifts { d1, d2 } => (y + d1).sqrt() + (y + d2).sqrt(),
            Target::Constant { value } => value,
        }
    }

    fn validate(&self) -> Result<(), LossError> {
        match *self {
            Target::Matched => Ok(()),
            Target::Shifts { d1, d2 } if d1 >= 0.0 && d2 >= 0.0 => Ok(()),
            Target::Constant { value } if value >= 0.0 => Ok(()),
            _ => Err(invalid(format!("target {self:?} needs nonnegative parameters"))),
        }
    }
}

fn default_sigma2() -> f64 {
    0.25
}

/// The loss family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// `t - y log(t + eps)`.
    PoissonReg { eps: f64 },
    /// `t - (y + eps) log(t + eps)`, minimized at `t = y`.
    PoissonUnbiased { eps: f64 },
    /// `(t - y)^2 / (2 sigma2)`.
    GaussianLsq {
        #[serde(default = "default_sigma2")]
        sigma2: f64,
    },
    /// `2 (sqrt(t + eps) - sqrt(y))^2`.
    Amplitude { eps: f64 },
    /// `2 (sqrt(t + c [- 1/4]) - sqrt(y + c))^2`.
    SqrtShift {
        c: f64,
        #[serde(default)]
        subtract_quarter: bool,
    },
    /// `1/2 (sqrt(t + c1) + sqrt(t + c2) - C_i)^2`.
    AveragingVst {
        c1: f64,
        c2: f64,
        #[serde(default)]
        target: Target,
    },
    /// Averaging loss for `y_i > 0`, plain `t` for `y_i = 0`.
    ZeroAdapted {
        c1: f64,
        c2: f64,
        #[serde(default)]
        target: Target,
    },
}

/// `ln(t + eps)` without losing the small-`t` digits to `t + eps` rounding.
fn ln_shifted(t: f64, eps: f64) -> f64 {
    eps.ln() + (t / eps).ln_1p()
}

impl LossKind {
    pub fn averaging(c1: f64, c2: f64) -> Self {
        LossKind::AveragingVst {
            c1,
            c2,
            target: Target::Matched,
        }
    }

    pub fn zero_adapted(c1: f64, c2: f64) -> Self {
        LossKind::ZeroAdapted {
            c1,
            c2,
            target: Target::Matched,
        }
    }

    /// Tukey-Freeman loss: `1/2 (sqrt(t + eps) + sqrt(t + 1) - sqrt(y) - sqrt(y + 1))^2`.
    pub fn tukey_freeman(eps: f64) -> Self {
        LossKind::AveragingVst {
            c1: eps,
            c2: 1.0,
            target: Target::Shifts { d1: 0.0, d2: 1.0 },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::PoissonReg { .. } => "poisson_reg",
            LossKind::PoissonUnbiased { .. } => "poisson_unbiased",
            LossKind::GaussianLsq { .. } => "gaussian_lsq",
            LossKind::Amplitude { .. } => "amplitude",
            LossKind::SqrtShift { .. } => "sqrt_shift",
            LossKind::AveragingVst { .. } => "averaging_vst",
            LossKind::ZeroAdapted { .. } => "zero_adapted",
        }
    }

    /// Compact parameter string, e.g. `eps=0.25`.
    pub fn params(&self) -> String {
        let target = |t: &Target| match t {
            Target::Matched => String::new(),
            Target::Shifts { d1, d2 } => format!(";d1={d1};d2={d2}"),
            Target::Constant { value } => format!(";C={value}"),
        };
        match self {
            LossKind::PoissonReg { eps }
            | LossKind::PoissonUnbiased { eps }
            | LossKind::Amplitude { eps } => format!("eps={eps}"),
            LossKind::GaussianLsq { sigma2 } => format!("sigma2={sigma2}"),
            LossKind::SqrtShift { c, subtract_quarter } => {
                format!("c={c};subtract_quarter={subtract_quarter}")
            }
            LossKind::AveragingVst { c1, c2, target: t } | LossKind::ZeroAdapted { c1, c2, target: t } => {
                format!("c1={c1};c2={c2}{}", target(t))
            }
        }
    }

    pub fn label(&self) -> String {
        format!("{}({})", self.name(), self.params())
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match self {
            LossKind::PoissonReg { eps } | LossKind::PoissonUnbiased { eps } | LossKind::Amplitude { eps } => {
                positive("eps", *eps)
            }
            LossKind::GaussianLsq { sigma2 } => positive("sigma2", *sigma2),
            LossKind::SqrtShift { c, subtract_quarter } => {
                if *subtract_quarter {
                    if *c >= 0.0 && c.is_finite() {
                        Ok(())
                    } else {
                        Err(invalid(format!("c must be >= 0, got {c}")))
                    }
                } else {
                    positive("c", *c)
                }
            }
            LossKind::AveragingVst { c1, c2, target } | LossKind::ZeroAdapted { c1, c2, target } => {
                positive("c1", *c1)?;
                positive("c2", *c2)?;
                if c1 > c2 {
                    return Err(invalid(format!("need c1 <= c2, got c1 = {c1}, c2 = {c2}")));
                }
                target.validate()
            }
        }
    }

    /// `(l(t), l'(t))` for one measurement with count `y`.
    ///
    /// Outside the domain of `sqrt_shift` with subtracted quarter both values
    /// are NaN.
    pub fn term(&self, y: u64, t: f64) -> (f64, f64) {
        let y = y as f64;
        match *self {
            LossKind::PoissonReg { eps } => {
                let s = t + eps;
                // y = 0 leaves exactly t
                let log_part = if y == 0.0 { 0.0 } else { y * ln_shifted(t, eps) };
                (t - log_part, 1.0 - y / s)
            }
            LossKind::PoissonUnbiased { eps } => {
                let s = t + eps;
                (t - (y + eps) * ln_shifted(t, eps), 1.0 - (y + eps) / s)
            }
            LossKind::GaussianLsq { sigma2 } => {
                let d = t - y;
                (d * d / (2.0 * sigma2), d / sigma2)
            }
            LossKind::Amplitude { eps } => {
                let r = (t + eps).sqrt();
                let d = r - y.sqrt();
                (2.0 * d * d, 2.0 * d / r)
            }
            LossKind::SqrtShift { c, subtract_quarter } => {
                let shift = if subtract_quarter { c - 0.25 } else { c };
                let arg = t + shift;
                if arg < 0.0 {
                    return (f64::NAN, f64::NAN);
                }
                let r = arg.sqrt();
                let d = r - (y + c).sqrt();
                let slope = if r > 0.0 { 2.0 * d / r } else { f64::NAN };
                (2.0 * d * d, slope)
            }
            LossKind::AveragingVst { c1, c2, ref target } => averaging_term(t, c1, c2, target.value(y, c1, c2)),
            LossKind::ZeroAdapted { c1, c2, ref target } => {
                if y == 0.0 {
                    (t, 1.0)
                } else {
                    averaging_term(t, c1, c2, target.value(y, c1, c2))
                }
            }
        }
    }

    fn has_domain(&self) -> bool {
        matches!(
            self,
            LossKind::SqrtShift {
                subtract_quarter: true,
                ..
            }
        )
    }

    /// How the constant Hessian bound is obtained, or why there is none.
    pub fn curvature(&self, counts: &[u64]) -> Result<Curvature, LossError> {
        self.validate()?;
        match *self {
            LossKind::PoissonReg { eps } => Ok(Curvature::WeightedGram(
                counts.iter().map(|&y| 1.0 + y as f64 / (8.0 * eps)).collect(),
            )),
            LossKind::PoissonUnbiased { eps } => Ok(Curvature::WeightedGram(
                counts
                    .iter()
                    .map(|&y| 1.0 + (y as f64 + eps) / (8.0 * eps))
                    .collect(),
            )),
            LossKind::GaussianLsq { .. } => Err(LossError::NoConstantBound("gaussian_lsq")),
            LossKind::Amplitude { .. } => Ok(Curvature::FrameNorm(2.0)),
            LossKind::SqrtShift { c, subtract_quarter } => {
                if subtract_quarter && c <= 0.25 {
                    Err(LossError::NoConstantBound("sqrt_shift with c <= 1/4 and subtracted quarter"))
                } else {
                    Ok(Curvature::FrameNorm(2.0))
                }
            }
            LossKind::AveragingVst { c1, c2, .. } | LossKind::ZeroAdapted { c1, c2, .. } => {
                Ok(Curvature::FrameNorm(0.5 * (3.0 + (c2 / c1).sqrt())))
            }
        }
    }
}

fn averaging_term(t: f64, c1: f64, c2: f64, target: f64) -> (f64, f64) {
    let r1 = (t + c1).sqrt();
    let r2 = (t + c2).sqrt();
    let d = r1 + r2 - target;
    (0.5 * d * d, 0.5 * d * (1.0 / r1 + 1.0 / r2))
}

/// Source of the constant Hessian bound `L`.
#[derive(Clone, Debug, PartialEq)]
pub enum Curvature {
    /// `L = factor * ||A||^2`.
    FrameNorm(f64),
    /// `L = ||diag(sqrt(w)) A||^2 = lambda_max(A^* diag(w) A)`.
    WeightedGram(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradEval {
    pub value: f64,
    pub grad: CVec,
    pub per_term: Option<Vec<f64>>,
}

/// A loss bound to a frame and observed counts.
#[derive(Clone, Copy, Debug)]
pub struct LossModel<'a> {
    pub kind: &'a LossKind,
    pub frame: &'a MeasurementFrame,
    pub counts: &'a [u64],
}

impl<'a> LossModel<'a> {
    pub fn new(kind: &'a LossKind, frame: &'a MeasurementFrame, counts: &'a [u64]) -> Result<Self, LossError> {
        kind.validate()?;
        if counts.len() != frame.m() {
            return Err(LinalgError::DimensionMismatch {
                expected: frame.m(),
                found: counts.len(),
            }
            .into());
        }
        Ok(LossModel { kind, frame, counts })
    }

    fn checked(&self, value: f64, z: &CVec) -> Result<f64, LossError> {
        if value.is_finite() {
            return Ok(value);
        }
        if self.kind.has_domain() {
            let w = self.frame.forward(z)?;
            let row = w
                .iter()
                .zip(self.counts)
                .position(|(w, &y)| !self.kind.term(y, w.norm_sqr()).1.is_finite())
                .unwrap_or(0);
            return Err(LossError::DomainViolation { row });
        }
        Err(LossError::NonFinite)
    }

    pub fn value(&self, z: &CVec) -> Result<f64, LossError> {
        let kind = self.kind;
        let counts = self.counts;
        let pb = self.frame.pullback(z, |i, w| {
            (kind.term(counts[i], w.norm_sqr()).0, Complex64::new(0.0, 0.0))
        })?;
        self.checked(pb.total, z)
    }

    /// Value and Wirtinger gradient `sum_i l_i'(t_i) <a_i, z> a_i` in one pass
    /// over the frame.
    pub fn gradient(&self, z: &CVec) -> Result<GradEval, LossError> {
        let kind = self.kind;
        let counts = self.counts;
        let pb = self.frame.pullback(z, |i, w| {
            let (l, dl) = kind.term(counts[i], w.norm_sqr());
            (l, w * dl)
        })?;
        let value = self.checked(pb.total, z)?;
        if pb.combination.iter().any(|g| !g.re.is_finite() || !g.im.is_finite()) {
            // value finite but slope infinite: the domain boundary
            return Err(self.checked(f64::NAN, z).unwrap_err());
        }
        Ok(GradEval {
            value,
            grad: pb.combination,
            per_term: None,
        })
    }

    /// Like [`gradient`](Self::gradient) but also keeps every `l_i(t_i)`.
    pub fn gradient_with_terms(&self, z: &CVec) -> Result<GradEval, LossError> {
        let mut eval = self.gradient(z)?;
        let w = self.frame.forward(z)?;
        eval.per_term = Some(
            w.iter()
                .zip(self.counts)
                .map(|(w, &y)| self.kind.term(y, w.norm_sqr()).0)
                .collect(),
        );
        Ok(eval)
    }

    /// The constant `L` bounding the Hessian quadratic form; `1/L` is the
    /// certified step size.
    pub fn lipschitz_bound(&self, power: &PowerIteration) -> Result<f64, LossError> {
        self.lipschitz_bound_given(None, power)
    }

    /// Same as [`lipschitz_bound`](Self::lipschitz_bound), reusing a known
    /// `||A||^2` when one is supplied.
    pub fn lipschitz_bound_given(
        &self,
        frame_norm_sqr: Option<f64>,
        power: &PowerIteration,
    ) -> Result<f64, LossError> {
        match self.kind.curvature(self.counts)? {
            Curvature::FrameNorm(factor) => {
                let nrm2 = match frame_norm_sqr {
                    Some(v) => v,
                    None => self.frame.spectral_norm(power)?.value.powi(2),
                };
                Ok(factor * nrm2)
            }
            Curvature::WeightedGram(weights) => {
                Ok(self.frame.weighted_gram(&weights)?.leading_eig(power)?.value)
            }
        }
    }
}
