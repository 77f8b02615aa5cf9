//! Reconstruction error modulo global phase and per-group statistics.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{CVec, LinalgError};
use crate::losses::LossKind;
use crate::optimizer::StopReason;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("reference vector has zero norm")]
    ZeroReference,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Phase factor `e^{i theta}` minimizing `||x - e^{i theta} x_hat||`, which
/// is `<x_hat, x> / |<x_hat, x>|` (any phase when the overlap vanishes).
pub fn optimal_phase(x: &CVec, x_hat: &CVec) -> Result<Complex64, LinalgError> {
    let overlap = x_hat.inner(x)?;
    let mag = overlap.norm();
    Ok(if mag > 0.0 {
        overlap / mag
    } else {
        Complex64::new(1.0, 0.0)
    })
}

/// `min_theta ||x - e^{i theta} x_hat|| / ||x||`.
///
/// Equals `sqrt(||x||^2 + ||x_hat||^2 - 2 |<x, x_hat>|) / ||x||`; the
/// difference is formed explicitly at the optimal phase so that small errors
/// do not suffer cancellation.
pub fn relative_error(x: &CVec, x_hat: &CVec) -> Result<f64, MetricsError> {
    let nx = x.norm();
    if nx == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    let phase = optimal_phase(x, x_hat)?;
    let diff: f64 = x
        .iter()
        .zip(x_hat.iter())
        .map(|(a, b)| (a - phase * b).norm_sqr())
        .sum();
    Ok(diff.sqrt() / nx)
}

/// Outcome of one solve in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub loss: LossKind,
    pub dose: f64,
    pub rep: usize,
    pub seed: u64,
    /// `None` when the instance carried no ground truth.
    pub relative_error: Option<f64>,
    pub iterations: usize,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub stop_reason: StopReason,
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub loss: String,
    pub params: String,
    pub dose: f64,
    pub mean_rel_err: f64,
    pub std_rel_err: f64,
    pub n_runs: usize,
}

/// Groups runs by (loss, dose) and reports mean and sample standard
/// deviation of the relative error. Groups appear in order of first
/// occurrence of the loss, then by increasing dose. Runs without an error
/// value are skipped.
pub fn aggregate(runs: &[RunSummary]) -> Vec<AggregateRow> {
    let mut losses: Vec<&LossKind> = Vec::new();
    for r in runs {
        if !losses.contains(&&r.loss) {
            losses.push(&r.loss);
        }
    }
    let mut rows = Vec::new();
    for loss in losses {
        let mut doses: Vec<f64> = runs.iter().filter(|r| &r.loss == loss).map(|r| r.dose).collect();
        doses.sort_by(f64::total_cmp);
        doses.dedup();
        for dose in doses {
            let errs: Vec<f64> = runs
                .iter()
                .filter(|r| &r.loss == loss && r.dose == dose)
                .filter_map(|r| r.relative_error)
                .collect();
            if errs.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&errs);
            rows.push(AggregateRow {
                loss: loss.name().to_string(),
                params: loss.params(),
                dose,
                mean_rel_err: mean,
                std_rel_err: std,
                n_runs: errs.len(),
            });
        }
    }
    rows
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
