//! Wirtinger gradient descent `z_{k+1} = z_k - mu * grad L(z_k)`.
//!
//! With [`StepMode::TheoremConstant`] the step is `mu = 1/L` for the loss's
//! constant Hessian bound `L`, which certifies
//! `L(z_k) - L(z_{k+1}) >= mu * ||grad L(z_{k+1})||^2` at every iteration.
//! The Gaussian least-squares loss has no such bound and is run with
//! Armijo backtracking instead.

use std::fmt::Write as _;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{leading_eig, CVec, LinalgError, MeasurementFrame, PowerIteration};
use crate::losses::{GradEval, LossError, LossModel};

/// Relative slack on the descent certificate for rounding.
pub const CERTIFICATE_SLACK: f64 = 1e-10;
/// Backtracking gives up below this step.
pub const MIN_STEP: f64 = 1e-18;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("incompatible loss and step rule: {0}")]
    Incompatible(String),
    #[error("backtracking stagnated: step fell below {MIN_STEP:e} without sufficient decrease")]
    Stagnation,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StepMode {
    /// `mu = 1/L` from the loss's Hessian bound.
    TheoremConstant,
    Fixed { mu: f64 },
    /// Armijo backtracking: each iteration starts from the previous accepted
    /// step times `growth` and shrinks by `shrink` until sufficient decrease.
    Backtracking { shrink: f64, growth: f64, initial: f64 },
}

impl StepMode {
    pub fn backtracking() -> Self {
        StepMode::Backtracking {
            shrink: 0.5,
            growth: 2.0,
            initial: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InitMode {
    Spectral {
        #[serde(default)]
        power: PowerIteration,
    },
    Given { z0: CVec },
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop once `||grad|| <= grad_tol`; `None` means `1e-8 * sqrt(n)`.
    pub grad_tol: Option<f64>,
    pub step: StepMode,
    pub init: InitMode,
    pub monitor_descent: bool,
    /// Record every iterate (memory heavy).
    pub keep_iterates: bool,
    /// Used for the spectral norms behind `L`.
    pub power: PowerIteration,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 2000,
            grad_tol: None,
            step: StepMode::TheoremConstant,
            init: InitMode::Spectral {
                power: PowerIteration::default(),
            },
            monitor_descent: false,
            keep_iterates: false,
            power: PowerIteration::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: String| Err(SolverError::InvalidConfig(msg));
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if let Some(tol) = self.grad_tol {
            if !(tol >= 0.0) {
                return bad(format!("grad_tol must be >= 0, got {tol}"));
            }
        }
        match self.step {
            StepMode::TheoremConstant => {}
            StepMode::Fixed { mu } => {
                if !(mu > 0.0 && mu.is_finite()) {
                    return bad(format!("fixed step must be positive, got {mu}"));
                }
            }
            StepMode::Backtracking {
                shrink,
                growth,
                initial,
            } => {
                if !(shrink > 0.0 && shrink < 1.0) {
                    return bad(format!("shrink factor must lie in (0, 1), got {shrink}"));
                }
                if !(growth >= 1.0 && growth.is_finite()) {
                    return bad(format!("growth factor must be >= 1, got {growth}"));
                }
                if !(initial > 0.0 && initial.is_finite()) {
                    return bad(format!("initial step must be positive, got {initial}"));
                }
            }
        }
        Ok(())
    }

    pub fn grad_tol_for(&self, n: usize) -> f64 {
        self.grad_tol.unwrap_or(1e-8 * (n as f64).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradTol,
    MaxIters,
    DescentViolation,
    /// Backtracking could not find a decreasing step.
    Stagnation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverRun {
    pub z: CVec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterates: Option<Vec<CVec>>,
    /// Loss at `z_0, ..., z_K`.
    pub loss_trace: Vec<f64>,
    pub grad_norm_trace: Vec<f64>,
    /// Step that produced each iterate; entry 0 (the start) is 0.
    pub step_trace: Vec<f64>,
    /// One entry per step when descent monitoring is on.
    pub descent_certificates: Vec<bool>,
    pub stop_reason: StopReason,
    /// The constant step, if one was used.
    pub step_size: Option<f64>,
    pub lipschitz: Option<f64>,
    /// True when spectral initialization had no counts to work with.
    pub init_fallback: bool,
}

impl SolverRun {
    pub fn iterations(&self) -> usize {
        self.loss_trace.len() - 1
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace holds the start")
    }

    pub fn final_grad_norm(&self) -> f64 {
        *self.grad_norm_trace.last().expect("trace holds the start")
    }

    /// Loss never rises by more than the rounding slack
    /// `CERTIFICATE_SLACK * |f|`; once converged, successive values differ
    /// only in the last bits.
    pub fn is_monotone(&self) -> bool {
        self.loss_trace
            .windows(2)
            .all(|w| w[1] <= w[0] + CERTIFICATE_SLACK * w[0].abs())
    }

    /// `iteration,loss,grad_norm,step` rows.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,loss,grad_norm,step\n");
        for (k, ((loss, g), step)) in self
            .loss_trace
            .iter()
            .zip(&self.grad_norm_trace)
            .zip(&self.step_trace)
            .enumerate()
        {
            writeln!(out, "{k},{loss:e},{g:e},{step:e}").unwrap();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralInit {
    pub z0: CVec,
    pub fallback: bool,
}

/// Power-method initialization: `z0 = lambda0 * v` with `v` the leading unit
/// eigenvector of `Y = (1/m) sum_i y_i a_i a_i^*` and
/// `lambda0 = sqrt(n * sum_i y_i / sum_i ||a_i||^2)`.
///
/// With all counts zero `Y` vanishes; a random unit vector drawn from
/// `fallback_seed` is returned instead and flagged.
pub fn spectral_init(
    frame: &MeasurementFrame,
    counts: &[u64],
    power: &PowerIteration,
    fallback_seed: u64,
) -> Result<SpectralInit, SolverError> {
    if counts.len() != frame.m() {
        return Err(LinalgError::DimensionMismatch {
            expected: frame.m(),
            found: counts.len(),
        }
        .into());
    }
    let total: f64 = counts.iter().map(|&y| y as f64).sum();
    if total == 0.0 {
        return Ok(SpectralInit {
            z0: random_unit(frame.n(), fallback_seed),
            fallback: true,
        });
    }
    let m = frame.m() as f64;
    let weights: Vec<f64> = counts.iter().map(|&y| y as f64 / m).collect();
    let est = leading_eig(
        |v| frame.weighted_gram_apply(&weights, v).expect("length checked"),
        frame.n(),
        power,
    )?;
    let scale = (frame.n() as f64 * total / frame.frobenius_sqr()).sqrt();
    Ok(SpectralInit {
        z0: est.vector.scaled(Complex64::new(scale, 0.0)),
        fallback: false,
    })
}

fn random_unit(n: usize, seed: u64) -> CVec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        if let Some(v) = CVec::random_gaussian(n, &mut rng).normalized() {
            return v;
        }
    }
}

/// Quantities that can be shared between solves on the same instance.
#[derive(Clone, Debug, Default)]
pub struct Precomputed {
    /// `||A||^2`.
    pub frame_norm_sqr: Option<f64>,
    /// Overrides the configured initialization.
    pub start: Option<SpectralInit>,
}

/// Armijo backtracking from `z`: shrinks `mu` by `shrink` until
/// `L(z - mu g) <= L(z) - mu/2 ||g||^2`. Returns the accepted point and step.
pub fn backtracking_step(
    model: &LossModel<'_>,
    z: &CVec,
    current: &GradEval,
    mu_init: f64,
    shrink: f64,
) -> Result<(CVec, f64), SolverError> {
    if !(shrink > 0.0 && shrink < 1.0) {
        return Err(SolverError::InvalidConfig(format!(
            "shrink factor must lie in (0, 1), got {shrink}"
        )));
    }
    let g2 = current.grad.norm_sqr();
    if g2 == 0.0 {
        return Ok((z.clone(), mu_init));
    }
    let mut mu = mu_init;
    while mu >= MIN_STEP {
        let mut trial = z.clone();
        trial.axpy(Complex64::new(-mu, 0.0), &current.grad)?;
        match model.value(&trial) {
            Ok(v) if v <= current.value - 0.5 * mu * g2 => return Ok((trial, mu)),
            Ok(_) | Err(LossError::DomainViolation { .. }) | Err(LossError::NonFinite) => {}
            Err(e) => return Err(e.into()),
        }
        mu *= shrink;
    }
    Err(SolverError::Stagnation)
}

pub fn solve(model: &LossModel<'_>, cfg: &SolverConfig) -> Result<SolverRun, SolverError> {
    solve_with(model, cfg, &Precomputed::default())
}

pub fn solve_with(
    model: &LossModel<'_>,
    cfg: &SolverConfig,
    pre: &Precomputed,
) -> Result<SolverRun, SolverError> {
    cfg.validate()?;
    let n = model.frame.n();

    let (lipschitz, constant_step) = match cfg.step {
        StepMode::TheoremConstant => {
            let l = model
                .lipschitz_bound_given(pre.frame_norm_sqr, &cfg.power)
                .map_err(|e| match e {
                    LossError::NoConstantBound(what) => SolverError::Incompatible(format!(
                        "{what} has no constant step size; use step mode `backtracking`"
                    )),
                    other => other.into(),
                })?;
            (Some(l), Some(1.0 / l))
        }
        StepMode::Fixed { mu } => (None, Some(mu)),
        StepMode::Backtracking { .. } => (None, None),
    };

    let start = match &pre.start {
        Some(s) => s.clone(),
        None => match &cfg.init {
            InitMode::Spectral { power } => spectral_init(model.frame, model.counts, power, power.seed)?,
            InitMode::Given { z0 } => {
                if z0.len() != n {
                    return Err(LinalgError::DimensionMismatch {
                        expected: n,
                        found: z0.len(),
                    }
                    .into());
                }
                SpectralInit {
                    z0: z0.clone(),
                    fallback: false,
                }
            }
            InitMode::Random { seed } => SpectralInit {
                z0: random_unit(n, *seed),
                fallback: false,
            },
        },
    };

    let grad_tol = cfg.grad_tol_for(n);
    let mut z = start.z0;
    let mut eval = model.gradient(&z)?;
    let mut run = SolverRun {
        z: z.clone(),
        iterates: cfg.keep_iterates.then(|| vec![z.clone()]),
        loss_trace: vec![eval.value],
        grad_norm_trace: vec![eval.grad.norm()],
        step_trace: vec![0.0],
        descent_certificates: Vec::new(),
        stop_reason: StopReason::MaxIters,
        step_size: constant_step,
        lipschitz,
        init_fallback: start.fallback,
    };
    let mut mu_prev = match cfg.step {
        StepMode::Backtracking { initial, .. } => initial,
        _ => 0.0,
    };

    for _ in 0..cfg.max_iters {
        if eval.grad.norm() <= grad_tol {
            run.stop_reason = StopReason::GradTol;
            break;
        }
        let (z_next, mu) = match (constant_step, &cfg.step) {
            (Some(mu), _) => {
                let mut next = z.clone();
                next.axpy(Complex64::new(-mu, 0.0), &eval.grad)?;
                (next, mu)
            }
            (None, StepMode::Backtracking { shrink, growth, .. }) => {
                match backtracking_step(model, &z, &eval, mu_prev * growth, *shrink) {
                    Ok(step) => step,
                    Err(SolverError::Stagnation) => {
                        run.stop_reason = StopReason::Stagnation;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            (None, _) => unreachable!("constant step modes always set a step"),
        };
        mu_prev = mu;
        let next_eval = model.gradient(&z_next)?;
        let next_norm = next_eval.grad.norm();

        run.loss_trace.push(next_eval.value);
        run.grad_norm_trace.push(next_norm);
        run.step_trace.push(mu);
        if let Some(iterates) = run.iterates.as_mut() {
            iterates.push(z_next.clone());
        }
        let certified = if cfg.monitor_descent {
            let ok = eval.value - next_eval.value
                >= mu * next_norm * next_norm - CERTIFICATE_SLACK * eval.value.abs();
            run.descent_certificates.push(ok);
            ok
        } else {
            true
        };
        z = z_next;
        eval = next_eval;
        if !certified {
            run.stop_reason = StopReason::DescentViolation;
            break;
        }
    }
    if run.stop_reason == StopReason::MaxIters && eval.grad.norm() <= grad_tol {
        run.stop_reason = StopReason::GradTol;
    }
    run.z = z;
    Ok(run)
}
