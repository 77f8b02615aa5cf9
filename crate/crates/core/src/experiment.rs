//! Seeded dose sweeps: instance generation, single solves and benchmarks.
//!
//! Instance seeds are split from the master seed as
//! `seed = master ^ splitmix64((dose_index << 32) | rep)`, so every loss in a
//! sweep sees the same instances (paired comparisons) and a cell's result
//! does not depend on how many other cells run or in which order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::losses::{LossKind, LossModel};
use crate::metrics::{aggregate, relative_error, AggregateRow, MetricsError, RunSummary};
use crate::model::{FrameSpec, InstanceFile, ModelError, ProblemInstance};
use crate::optimizer::{
    solve_with, spectral_init, InitMode, Precomputed, SolverConfig, SolverError, SolverRun, StepMode,
};
use crate::vst::{variance_curve, Transform, VstError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Vst(#[from] VstError),
}

impl ExperimentError {
    /// True for errors caused by the configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_)
                | ExperimentError::Solver(SolverError::InvalidConfig(_))
                | ExperimentError::Solver(SolverError::Incompatible(_))
        )
    }
}

/// Problem size presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// n = 64, m = 640.
    Ci,
    /// n = 256, m = 2560.
    Paper,
}

impl Scale {
    pub fn frame(self) -> FrameSpec {
        let n = match self {
            Scale::Ci => 64,
            Scale::Paper => 256,
        };
        FrameSpec::Gaussian { n, m: 10 * n }
    }
}

impl FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ci" => Ok(Scale::Ci),
            "paper" => Ok(Scale::Paper),
            other => Err(format!("unknown scale `{other}` (expected ci or paper)")),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Ci => "ci",
            Scale::Paper => "paper",
        })
    }
}

/// A loss with an optional per-loss step rule overriding the solver's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    #[serde(flatten)]
    pub kind: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<StepMode>,
}

impl From<LossKind> for LossSpec {
    fn from(kind: LossKind) -> Self {
        LossSpec { kind, step: None }
    }
}

impl LossSpec {
    pub fn solver_config(&self, base: &SolverConfig) -> SolverConfig {
        let mut cfg = base.clone();
        if let Some(step) = &self.step {
            cfg.step = step.clone();
        }
        cfg
    }

    /// Rejects invalid parameters and loss/step combinations that cannot run.
    pub fn validate(&self, base: &SolverConfig) -> Result<(), ExperimentError> {
        self.kind
            .validate()
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", self.kind.label())))?;
        let cfg = self.solver_config(base);
        cfg.validate()
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", self.kind.label())))?;
        if cfg.step == StepMode::TheoremConstant && matches!(self.kind, LossKind::GaussianLsq { .. }) {
            return Err(ExperimentError::Config(format!(
                "{} has no constant step size; use step mode `backtracking`",
                self.kind.label()
            )));
        }
        Ok(())
    }
}

fn default_frame() -> FrameSpec {
    Scale::Ci.frame()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_frame")]
    pub frame: FrameSpec,
    pub doses: Vec<f64>,
    pub repetitions: usize,
    pub losses: Vec<LossSpec>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

impl ExperimentConfig {
    /// Doses 500, 1000, ..., 4000, twenty repetitions, the Poisson flow for
    /// five regularization parameters, the zero-adapted averaging loss with
    /// `(0.12, 0.27)` and the amplitude loss.
    pub fn dose_sweep(scale: Scale) -> Self {
        let mut losses: Vec<LossSpec> = [1e-3, 0.1, 0.25, 0.5, 1.0]
            .into_iter()
            .map(|eps| LossKind::PoissonReg { eps }.into())
            .collect();
        losses.push(LossKind::zero_adapted(0.12, 0.27).into());
        losses.push(LossKind::Amplitude { eps: 0.01 }.into());
        ExperimentConfig {
            frame: scale.frame(),
            doses: (1..=8).map(|k| 500.0 * k as f64).collect(),
            repetitions: 20,
            losses,
            solver: SolverConfig::default(),
            seed: 0,
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        if self.doses.is_empty() {
            return bad("dose list is empty".into());
        }
        if let Some(d) = self.doses.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return bad(format!("doses must be positive and finite, got {d}"));
        }
        if self.losses.is_empty() {
            return bad("loss list is empty".into());
        }
        self.frame
            .validate()
            .map_err(|e| ExperimentError::Config(format!("frame: {e}")))?;
        self.solver
            .validate()
            .map_err(|e| ExperimentError::Config(format!("solver: {e}")))?;
        for loss in &self.losses {
            loss.validate(&self.solver)?;
        }
        Ok(())
    }

    pub fn instance_count(&self) -> usize {
        self.doses.len() * self.repetitions
    }

    /// `(dose_index, rep)` of the `k`-th instance (dose-major order).
    pub fn cell(&self, k: usize) -> (usize, usize) {
        (k / self.repetitions, k % self.repetitions)
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn instance_seed(master: u64, dose_index: usize, rep: usize) -> u64 {
    master ^ splitmix64(((dose_index as u64) << 32) | rep as u64)
}

pub fn instance_name(dose_index: usize, rep: usize) -> String {
    format!("instance_d{dose_index:02}_r{rep:03}.json")
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedInstance {
    pub name: String,
    pub dose_index: usize,
    pub rep: usize,
    pub instance: ProblemInstance,
}

/// Generates every instance of the sweep, in dose-major order.
pub fn simulate(cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<NamedInstance>, ExperimentError> {
    cfg.validate()?;
    exec.map_indexed(cfg.instance_count(), |k| {
        let (d, r) = cfg.cell(k);
        let instance = ProblemInstance::generate(&cfg.frame, cfg.doses[d], instance_seed(cfg.seed, d, r))?;
        Ok(NamedInstance {
            name: instance_name(d, r),
            dose_index: d,
            rep: r,
            instance,
        })
    })
    .into_iter()
    .collect()
}

/// Loss and solver settings for a single solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSpec {
    pub loss: LossSpec,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl Default for SolveSpec {
    fn default() -> Self {
        SolveSpec {
            loss: LossKind::zero_adapted(0.12, 0.27).into(),
            solver: SolverConfig::default(),
        }
    }
}

impl SolveSpec {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let spec: SolveSpec =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.solver
            .validate()
            .map_err(|e| ExperimentError::Config(format!("solver: {e}")))?;
        self.loss.validate(&self.solver)
    }
}

fn summarize(
    loss: &LossKind,
    inst: &ProblemInstance,
    rep: usize,
    run: &SolverRun,
    with_truth: bool,
) -> Result<RunSummary, ExperimentError> {
    let relative_error = if with_truth {
        Some(relative_error(&inst.scaled_truth(), &run.z)?)
    } else {
        None
    };
    Ok(RunSummary {
        loss: loss.clone(),
        dose: inst.dose,
        rep,
        seed: inst.seed,
        relative_error,
        iterations: run.iterations(),
        final_loss: run.final_loss(),
        final_grad_norm: run.final_grad_norm(),
        stop_reason: run.stop_reason,
    })
}

/// Solves a stored instance. The relative error is reported only when the
/// file carries the ground truth.
pub fn solve_file(file: &InstanceFile, spec: &SolveSpec) -> Result<(SolverRun, RunSummary), ExperimentError> {
    spec.validate()?;
    let frame = file.frame()?;
    let model = LossModel::new(&spec.loss.kind, &frame, &file.counts).map_err(SolverError::from)?;
    let run = solve_with(&model, &spec.loss.solver_config(&spec.solver), &Precomputed::default())?;
    let summary = match file.truth {
        Some(_) => {
            let inst = file.to_instance()?;
            summarize(&spec.loss.kind, &inst, 0, &run, true)?
        }
        None => RunSummary {
                loss: spec.loss.kind.clone(),
                dose: file.dose,
                rep: 0,
                seed: file.seed,
                relative_error: None,
                iterations: run.iterations(),
                final_loss: run.final_loss(),
                final_grad_norm: run.final_grad_norm(),
            stop_reason: run.stop_reason,
        },
    };
    Ok((run, summary))
}

/// A sweep cell that failed; the rest of the sweep still runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub loss: String,
    pub dose: f64,
    pub rep: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    /// Ordered by dose, repetition, then loss as listed in the config.
    pub runs: Vec<RunSummary>,
    pub failures: Vec<CellFailure>,
    pub table: Vec<AggregateRow>,
}

/// Runs one instance through every configured loss, sharing `||A||^2` and
/// the spectral initialization between them.
fn run_instance(cfg: &ExperimentConfig, d: usize, r: usize) -> Vec<Result<RunSummary, CellFailure>> {
    let seed = instance_seed(cfg.seed, d, r);
    let fail_all = |e: String| -> Vec<Result<RunSummary, CellFailure>> {
        cfg.losses
            .iter()
            .map(|l| {
                Err(CellFailure {
                    loss: l.kind.label(),
                    dose: cfg.doses[d],
                    rep: r,
                    seed,
                    error: e.clone(),
                })
            })
            .collect()
    };
    let inst = match ProblemInstance::generate(&cfg.frame, cfg.doses[d], seed) {
        Ok(i) => i,
        Err(e) => return fail_all(e.to_string()),
    };
    let norm = match inst
        .frame
        .weighted_gram(&vec![1.0; inst.m()])
        .and_then(|g| g.leading_eig(&cfg.solver.power))
    {
        Ok(est) => est.value,
        Err(e) => return fail_all(e.to_string()),
    };
    let start = match &cfg.solver.init {
        InitMode::Spectral { power } => match spectral_init(&inst.frame, &inst.counts, power, seed) {
            Ok(s) => Some(s),
            Err(e) => return fail_all(e.to_string()),
        },
        _ => None,
    };
    let pre = Precomputed {
        frame_norm_sqr: Some(norm),
        start,
    };
    cfg.losses
        .iter()
        .map(|spec| {
            let attempt = || -> Result<RunSummary, ExperimentError> {
                let model =
                    LossModel::new(&spec.kind, &inst.frame, &inst.counts).map_err(SolverError::from)?;
                let run = solve_with(&model, &spec.solver_config(&cfg.solver), &pre)?;
                summarize(&spec.kind, &inst, r, &run, true)
            };
            attempt().map_err(|e| CellFailure {
                loss: spec.kind.label(),
                dose: inst.dose,
                rep: r,
                seed,
                error: e.to_string(),
            })
        })
        .collect()
}

/// Full sweep over doses x repetitions x losses. Instances are independent
/// tasks executed under `exec`; results are assembled by cell identity.
pub fn run_sweep(cfg: &ExperimentConfig, exec: Execution) -> Result<SweepReport, ExperimentError> {
    cfg.validate()?;
    let per_instance = exec.map_indexed(cfg.instance_count(), |k| {
        let (d, r) = cfg.cell(k);
        run_instance(cfg, d, r)
    });
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for cell in per_instance.into_iter().flatten() {
        match cell {
            Ok(run) => runs.push(run),
            Err(f) => failures.push(f),
        }
    }
    let table = aggregate(&runs);
    Ok(SweepReport {
        runs,
        failures,
        table,
    })
}

/// One row of a variance table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VstRow {
    pub transform: String,
    #[serde(rename = "λ")]
    pub lambda: f64,
    pub mean: f64,
    pub variance: f64,
    pub truncation_k: u64,
}

pub fn vst_table(transforms: &[Transform], grid: &[f64]) -> Result<Vec<VstRow>, ExperimentError> {
    if grid.is_empty() {
        return Err(ExperimentError::Config("lambda grid is empty".into()));
    }
    if let Some(l) = grid.iter().find(|l| !(**l > 0.0)) {
        return Err(ExperimentError::Config(format!("lambda grid must be positive, got {l}")));
    }
    let mut rows = Vec::new();
    for t in transforms {
        for rep in variance_curve(t, grid)? {
            rows.push(VstRow {
                transform: t.to_string(),
                lambda: rep.lambda,
                mean: rep.mean,
                variance: rep.variance,
                truncation_k: rep.truncation_k,
            });
        }
    }
    Ok(rows)
}

/// `count` points spaced evenly on `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::dose_sweep(Scale::Ci);
        cfg.frame = FrameSpec::Gaussian { n: 8, m: 48 };
        cfg.doses = vec![200.0, 800.0];
        cfg.repetitions = 3;
        cfg.solver.max_iters = 50;
        cfg.seed = 7;
        cfg
    }

    #[test]
    fn config_round_trip() {
        let cfg = small();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let mut with_step = cfg.clone();
        with_step.losses.push(LossSpec {
            kind: LossKind::GaussianLsq { sigma2: 0.25 },
            step: Some(StepMode::backtracking()),
        });
        assert_eq!(ExperimentConfig::from_json(&with_step.to_json()).unwrap(), with_step);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small();
        cfg.repetitions = 0;
        assert!(cfg.validate().unwrap_err().is_config());
        let mut cfg = small();
        cfg.doses.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.doses.push(-1.0);
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.losses.push(LossKind::GaussianLsq { sigma2: 0.25 }.into());
        assert!(cfg.validate().unwrap_err().is_config());
        assert!(ExperimentConfig::from_json("{\"doses\": [1]}").is_err());
        assert!(ExperimentConfig::from_json(
            "{\"doses\":[1],\"repetitions\":1,\"losses\":[{\"kind\":\"amplitude\",\"eps\":0.1}],\"bogus\":1}"
        )
        .is_err());
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let mut seen = std::collections::HashSet::new();
        for d in 0..8 {
            for r in 0..20 {
                assert!(seen.insert(instance_seed(42, d, r)));
            }
        }
        assert_eq!(instance_seed(42, 3, 5), 42 ^ splitmix64((3 << 32) | 5));
        // reference value of the mixer
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn simulate_names_and_determinism() {
        let cfg = small();
        let a = simulate(&cfg, Execution::Sequential).unwrap();
        let b = simulate(&cfg, Execution::Parallel).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        assert_eq!(a[4].name, "instance_d01_r001.json");
        assert_eq!(a[4].instance.dose, 800.0);
    }

    #[test]
    fn sweep_is_order_independent() {
        let cfg = small();
        let seq = run_sweep(&cfg, Execution::Sequential).unwrap();
        let par = run_sweep(&cfg, Execution::Parallel).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.runs.len(), 2 * 3 * 7);
        assert!(seq.failures.is_empty());
        assert_eq!(seq.table.len(), 2 * 7);
        assert!(seq.table.iter().all(|row| row.n_runs == 3));
    }

    #[test]
    fn vst_table_rows() {
        let rows = vst_table(&[Transform::Sqrt, Transform::Anscombe], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[3].transform, "anscombe");
        assert!(vst_table(&[Transform::Sqrt], &[0.0]).is_err());
        assert_eq!(linear_grid(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
    }
}
