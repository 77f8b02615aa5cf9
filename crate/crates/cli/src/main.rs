use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lowdose_core::exec::{with_threads, Execution};
use lowdose_core::experiment::{
    linear_grid, run_sweep, simulate, solve_file, vst_table, ExperimentConfig, ExperimentError, Scale,
    SolveSpec,
};
use lowdose_core::metrics::RunSummary;
use lowdose_core::model::InstanceFile;
use lowdose_core::vst::Transform;

/// Low-dose Poisson phase retrieval experiments.
#[derive(Parser, Debug)]
#[command(name = "lowdose", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Problem size preset: ci (n=64, m=640) or paper (n=256, m=2560).
    #[arg(long, global = true)]
    scale: Option<Scale>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and store one instance per (dose, repetition).
    Simulate,
    /// Solve one stored instance.
    Solve {
        instance: PathBuf,
        /// Loss as inline JSON, e.g. '{"kind":"poisson_reg","eps":0.25}'.
        #[arg(long)]
        loss: Option<String>,
    },
    /// Full dose sweep; writes the aggregated error table.
    Benchmark,
    /// Variance of transformed Poisson variables over a grid of rates.
    VstAnalyze {
        /// Comma-separated transforms: sqrt, anscombe, tukey_freeman,
        /// shifted_sqrt:c, averaging:c1:c2.
        #[arg(long, default_value = "sqrt,anscombe,tukey_freeman,averaging:0.12:0.27")]
        transforms: String,
        /// Comma-separated rates; overrides the linear grid.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value_t = 0.05)]
        lambda_min: f64,
        #[arg(long, default_value_t = 10.0)]
        lambda_max: f64,
        #[arg(long, default_value_t = 200)]
        points: usize,
    },
}

/// Failure split by exit code.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn from_experiment(e: ExperimentError) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

trait OrConfig<T> {
    fn config_err(self) -> std::result::Result<T, Failure>;
    fn runtime_err(self) -> std::result::Result<T, Failure>;
}

impl<T> OrConfig<T> for Result<T> {
    fn config_err(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Config)
    }
    fn runtime_err(self) -> std::result::Result<T, Failure> {
        self.map_err(Failure::Runtime)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let jobs = cli.common.jobs;
    match with_threads(jobs, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let common = &cli.common;
    match &cli.command {
        Command::Simulate => cmd_simulate(common),
        Command::Solve { instance, loss } => cmd_solve(common, instance, loss.as_deref()),
        Command::Benchmark => cmd_benchmark(common),
        Command::VstAnalyze {
            transforms,
            grid,
            lambda_min,
            lambda_max,
            points,
        } => cmd_vst(common, transforms, grid.as_deref(), *lambda_min, *lambda_max, *points),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Loads the experiment config (or the paper sweep preset) and applies the
/// command-line overrides.
fn experiment_config(common: &Common) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = read(path).config_err()?;
            ExperimentConfig::from_json(&text)
                .map_err(|e| anyhow!(e).context(format!("in {}", path.display())))
                .config_err()?
        }
        None => ExperimentConfig::dose_sweep(common.scale.unwrap_or(Scale::Ci)),
    };
    if let Some(scale) = common.scale {
        cfg.frame = scale.frame();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(Failure::from_experiment)?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg_output: Option<&str>) -> std::result::Result<PathBuf, Failure> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg_output.map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("lowdose-out"));
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime_err()?;
    Ok(dir)
}

#[derive(Serialize)]
struct Metadata<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    parallel: bool,
    config: &'a C,
}

fn write_metadata<C: Serialize>(dir: &Path, command: &str, config: &C) -> Result<()> {
    let meta = Metadata {
        tool: "lowdose",
        version: env!("CARGO_PKG_VERSION"),
        command,
        parallel: Execution::default() == Execution::Parallel,
        config,
    };
    write(
        &dir.join(format!("{command}_meta.json")),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )
}

fn cmd_simulate(common: &Common) -> std::result::Result<(), Failure> {
    let cfg = experiment_config(common)?;
    let dir = out_dir(common, cfg.output.as_deref())?;
    let instances = simulate(&cfg, Execution::default()).map_err(Failure::from_experiment)?;
    for inst in &instances {
        let file = inst.instance.to_file(true);
        write(&dir.join(&inst.name), file.to_json().as_bytes()).runtime_err()?;
    }
    write_metadata(&dir, "simulate", &cfg).runtime_err()?;
    println!("wrote {} instances to {}", instances.len(), dir.display());
    Ok(())
}

fn cmd_solve(common: &Common, instance: &Path, loss: Option<&str>) -> std::result::Result<(), Failure> {
    let mut spec = match &common.config {
        Some(path) => {
            let text = read(path).config_err()?;
            SolveSpec::from_json(&text)
                .map_err(|e| anyhow!(e).context(format!("in {}", path.display())))
                .config_err()?
        }
        None => SolveSpec::default(),
    };
    if let Some(json) = loss {
        spec.loss = serde_json::from_str(json)
            .with_context(|| format!("parsing loss {json}"))
            .config_err()?;
    }
    spec.validate().map_err(Failure::from_experiment)?;
    let file = InstanceFile::from_json(&read(instance).config_err()?)
        .map_err(|e| anyhow!(e).context(format!("in {}", instance.display())))
        .config_err()?;

    let (run, summary) = solve_file(&file, &spec).map_err(Failure::from_experiment)?;

    let dir = out_dir(common, None)?;
    let stem = instance
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("instance");
    let tag = format!("{stem}_{}", spec.loss.kind.name());
    write(
        &dir.join(format!("{tag}_run.json")),
        serde_json::to_string_pretty(&run).map_err(anyhow::Error::from).runtime_err()?.as_bytes(),
    )
    .runtime_err()?;
    write(&dir.join(format!("{tag}_trace.csv")), run.trace_csv().as_bytes()).runtime_err()?;
    let summary_json = serde_json::to_string_pretty(&summary)
        .map_err(anyhow::Error::from)
        .runtime_err()?;
    write(&dir.join(format!("{tag}_summary.json")), summary_json.as_bytes()).runtime_err()?;
    write_metadata(&dir, "solve", &spec).runtime_err()?;
    println!("{summary_json}");
    Ok(())
}

#[derive(Serialize)]
struct RunRow<'a> {
    loss: &'a str,
    params: String,
    dose: f64,
    rep: usize,
    seed: u64,
    relative_error: Option<f64>,
    iterations: usize,
    final_grad_norm: f64,
    stop_reason: &'a str,
}

fn stop_name(run: &RunSummary) -> &'static str {
    use lowdose_core::optimizer::StopReason::*;
    match run.stop_reason {
        GradTol => "grad_tol",
        MaxIters => "max_iters",
        DescentViolation => "descent_violation",
        Stagnation => "stagnation",
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_benchmark(common: &Common) -> std::result::Result<(), Failure> {
    let cfg = experiment_config(common)?;
    let dir = out_dir(common, cfg.output.as_deref())?;
    let report = run_sweep(&cfg, Execution::default()).map_err(Failure::from_experiment)?;

    write_csv(&dir.join("summary.csv"), &report.table).runtime_err()?;
    let runs = report.runs.iter().map(|r| RunRow {
        loss: r.loss.name(),
        params: r.loss.params(),
        dose: r.dose,
        rep: r.rep,
        seed: r.seed,
        relative_error: r.relative_error,
        iterations: r.iterations,
        final_grad_norm: r.final_grad_norm,
        stop_reason: stop_name(r),
    });
    write_csv(&dir.join("runs.csv"), runs).runtime_err()?;
    if !report.failures.is_empty() {
        write_csv(&dir.join("failures.csv"), &report.failures).runtime_err()?;
        eprintln!("{} cells failed; see failures.csv", report.failures.len());
    }
    write_metadata(&dir, "benchmark", &cfg).runtime_err()?;
    println!(
        "{} runs, {} failures; summary in {}",
        report.runs.len(),
        report.failures.len(),
        dir.join("summary.csv").display()
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow!("bad {what} `{s}`: {e}")))
        .collect()
}

fn cmd_vst(
    common: &Common,
    transforms: &str,
    grid: Option<&str>,
    lo: f64,
    hi: f64,
    points: usize,
) -> std::result::Result<(), Failure> {
    let transforms: Vec<Transform> = parse_list(transforms, "transform").config_err()?;
    let grid = match grid {
        Some(g) => parse_list::<f64>(g, "rate").config_err()?,
        None => linear_grid(lo, hi, points),
    };
    let rows = vst_table(&transforms, &grid).map_err(Failure::from_experiment)?;
    let dir = out_dir(common, None)?;
    write_csv(&dir.join("vst.csv"), &rows).runtime_err()?;
    #[derive(Serialize)]
    struct VstSettings {
        transforms: Vec<String>,
        grid: Vec<f64>,
    }
    let settings = VstSettings {
        transforms: transforms.iter().map(|t| t.to_string()).collect(),
        grid,
    };
    write_metadata(&dir, "vst", &settings).runtime_err()?;
    println!("wrote {} rows to {}", rows.len(), dir.join("vst.csv").display());
    Ok(())
}
