//! `oikf`: simulate, filter and benchmark outlier-insensitive Kalman filters.
//!
//!   oikf simulate --out traj.csv --horizon 2000 --p 0.2 --scale 30
//!   oikf filter --input traj.csv --engine am --estimates est.csv --diagnostics diag.csv
//!   oikf sweep --input fixture.csv --obs-dim 2 --state-dim 4 --dt 0.2 --table table.csv
//!   oikf fig2 --panel high --out fig2.csv
//!   oikf convergence --scale 30 --out conv.csv

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use oikf_core::baselines::Chi2Config;
use oikf_core::dataio;
use oikf_core::eval::{
    self, ConvergenceConfig, MseVsRConfig, OutlierRegime, SweepGrid,
};
use oikf_core::ssmodel::{self, build_position_only_model, build_wna_model};
use oikf_core::{Engine, OikfConfig, OutlierSpec, SignMode, Variant};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "oikf", version, about = "Outlier-insensitive Kalman filtering toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic trajectory with injected outliers.
    Simulate(SimulateArgs),
    /// Filter a trajectory file.
    Filter(FilterArgs),
    /// Per-direction grid search over (q², r²) for every engine.
    Sweep(SweepArgs),
    /// MSE vs observation-noise level on synthetic data.
    Fig2(Fig2Args),
    /// γ̂² iteration traces at detected outliers.
    Convergence(ConvergenceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    /// Position and velocity observed (H = I₂).
    Wna,
    /// Position observed only (H = [1 0]).
    Position,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EngineKind {
    Kf,
    Am,
    Em,
    Chi2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Panel {
    /// No outliers.
    Clean,
    /// p = 0.2, Rayleigh scale 3.
    Low,
    /// p = 0.2, Rayleigh scale 30.
    High,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Process-noise variance q².
    #[arg(long, default_value_t = 0.1)]
    q_var: f64,
    /// Observation-noise variance r².
    #[arg(long, default_value_t = 1.0)]
    r_var: f64,
    /// Sample spacing in seconds.
    #[arg(long, default_value_t = 1.0)]
    dt: f64,
    #[arg(long, value_enum, default_value_t = ModelKind::Wna)]
    model: ModelKind,
}

impl ModelArgs {
    fn build(&self) -> Result<ssmodel::SystemModel> {
        Ok(match self.model {
            ModelKind::Wna => build_wna_model(self.q_var, self.r_var, self.dt)?,
            ModelKind::Position => build_position_only_model(self.q_var, self.r_var, self.dt)?,
        })
    }
}

#[derive(Debug, Args)]
struct OutlierArgs {
    /// Per-entry outlier probability.
    #[arg(long, default_value_t = 0.2)]
    p: f64,
    /// Rayleigh scale σ of the outlier magnitude.
    #[arg(long, default_value_t = 30.0)]
    scale: f64,
    /// symmetric | positive
    #[arg(long, default_value = "symmetric")]
    sign_mode: SignMode,
}

#[derive(Debug, Args)]
struct EngineArgs {
    #[arg(long, value_enum, default_value_t = EngineKind::Am)]
    engine: EngineKind,
    /// Maximum inner iterations of the NUV update.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Relative γ̂² change for early exit.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Significance level of the chi-squared gate.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Record per-iteration γ̂² in the diagnostics.
    #[arg(long)]
    record_trace: bool,
}

impl EngineArgs {
    fn build(&self) -> Result<Engine> {
        let oikf = |variant| OikfConfig {
            variant,
            max_iters: self.iters,
            tol: self.tol,
            record_trace: self.record_trace,
        };
        let engine = match self.engine {
            EngineKind::Kf => Engine::Kf,
            EngineKind::Am => Engine::Oikf(oikf(Variant::Am)),
            EngineKind::Em => Engine::Oikf(oikf(Variant::Em)),
            EngineKind::Chi2 => Engine::Chi2(Chi2Config {
                alpha: self.alpha,
                dof: None,
            }),
        };
        engine.validate()?;
        Ok(engine)
    }
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    outliers: OutlierArgs,
    #[arg(long, default_value_t = 2000)]
    horizon: usize,
    /// Seed for the trajectory noise.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Seed for outlier placement and magnitude.
    #[arg(long, default_value_t = 1)]
    outlier_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Posterior means and variances.
    #[arg(long)]
    estimates: PathBuf,
    /// Per-step outlier diagnostics.
    #[arg(long)]
    diagnostics: PathBuf,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    input: PathBuf,
    /// Number of observed directions in the file.
    #[arg(long, default_value_t = 1)]
    obs_dim: usize,
    /// Number of ground-truth columns (obs_dim or 2·obs_dim).
    #[arg(long, default_value_t = 2)]
    state_dim: usize,
    /// Sample spacing; inferred from the timestamps when omitted.
    #[arg(long)]
    dt: Option<f64>,
    /// Comma-separated direction labels, e.g. `north,east`.
    #[arg(long, value_delimiter = ',')]
    directions: Vec<String>,
    /// q² grid in dB (start,stop,step).
    #[arg(long, allow_hyphen_values = true, value_parser = parse_db_range, default_value = "-30,0,5")]
    q_db: DbRange,
    /// r² grid in dB (start,stop,step).
    #[arg(long, allow_hyphen_values = true, value_parser = parse_db_range, default_value = "-10,30,2")]
    r_db: DbRange,
    /// Chi-squared significance levels to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [0.001, 0.01, 0.05, 0.1])]
    alphas: Vec<f64>,
    /// Summary table (one row per engine).
    #[arg(long)]
    table: PathBuf,
    /// Every grid point with the selected one flagged.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
}

#[derive(Debug, Args)]
struct Fig2Args {
    #[arg(long, value_enum, default_value_t = Panel::High)]
    panel: Panel,
    /// r² grid in dB (start,stop,step).
    #[arg(long, allow_hyphen_values = true, value_parser = parse_db_range, default_value = "-10,25,5")]
    r_db: DbRange,
    #[arg(long, allow_negative_numbers = true, default_value_t = -10.0)]
    q_db: f64,
    #[arg(long, default_value_t = 2000)]
    horizon: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.001, 0.01, 0.05, 0.1, 0.2])]
    alphas: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
}

#[derive(Debug, Args)]
struct ConvergenceArgs {
    #[arg(long, default_value_t = 30.0)]
    scale: f64,
    #[arg(long, default_value_t = 0.2)]
    p: f64,
    #[arg(long, default_value_t = 1.0)]
    r_var: f64,
    #[arg(long, allow_negative_numbers = true, default_value_t = -10.0)]
    q_db: f64,
    #[arg(long, default_value = "am")]
    variant: Variant,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 2000)]
    horizon: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    format: OutputFormat,
}

/// `start,stop,step` in dB, parsed from a single argument so that negative
/// bounds are not mistaken for flags.
#[derive(Debug, Clone, Copy, PartialEq)]
struct DbRange {
    start: f64,
    stop: f64,
    step: f64,
}

fn parse_db_range(s: &str) -> std::result::Result<DbRange, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(format!("expected start,stop,step, got {} values", parts.len()));
    };
    Ok(DbRange { start, stop, step })
}

fn grid_from(range: &DbRange, name: &str) -> Result<Vec<f64>> {
    let DbRange { start, stop, step } = *range;
    if !(step > 0.0) || stop < start {
        bail!("--{name}: need step > 0 and stop ≥ start");
    }
    Ok(eval::db_range(start, stop, step))
}

fn write_output(path: &PathBuf, format: OutputFormat, csv: Vec<String>, json: serde_json::Value) -> Result<()> {
    match format {
        OutputFormat::Csv => dataio::write_table(path, csv)?,
        OutputFormat::Json => std::fs::write(path, serde_json::to_string_pretty(&json)? + "\n")?,
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let model = args.model.build()?;
    let spec = OutlierSpec::new(args.outliers.p, args.outliers.scale, args.outliers.sign_mode, args.outlier_seed)?;
    if args.horizon == 0 {
        bail!("invalid parameter `horizon`: must be at least 1");
    }
    let x0 = DVector::zeros(model.state_dim());
    let clean = ssmodel::simulate_trajectory(&model, &x0, args.horizon, args.model.dt, args.data_seed)?;
    let series = ssmodel::inject_outliers(&clean, &spec)?;
    dataio::write_trajectory(&series, &args.out)?;
    println!("T={} outliers={}", series.len(), series.outlier_count());
    Ok(())
}

fn cmd_filter(args: &FilterArgs) -> Result<()> {
    let model = args.model.build()?;
    let engine = args.engine.build()?;
    let traj = dataio::read_trajectory(&args.input, model.obs_dim(), model.state_dim())
        .with_context(|| format!("reading {}", args.input.display()))?;
    let series = &traj.series;
    let run = oikf_core::oikf::filter_series(series, &model, &engine, None)?;
    dataio::write_table(&args.estimates, dataio::estimates_lines(&series.times, &run))?;
    dataio::write_table(
        &args.diagnostics,
        dataio::diagnostics_lines(&series.times, &run, args.engine.record_trace),
    )?;

    if let Some(truth) = &series.truth_states {
        let dims: Vec<usize> = if model.state_dim() == 2 { vec![0] } else { (0..model.state_dim()).collect() };
        let mut report = eval::compute_metrics(&run.estimates, truth, &dims, &run.step_seconds)?;
        report.engine = engine.label().to_string();
        report.params.insert("q_var".into(), args.model.q_var);
        report.params.insert("r_var".into(), args.model.r_var);
        if let Engine::Chi2(cfg) = engine {
            report.params.insert("alpha".into(), cfg.alpha);
        }
        match args.format {
            OutputFormat::Json => println!("{}", serde_json::to_string(&report)?),
            OutputFormat::Csv => {
                for line in dataio::metrics_table_lines(std::slice::from_ref(&report)) {
                    println!("{line}");
                }
            }
        }
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let traj = dataio::read_trajectory(&args.input, args.obs_dim, args.state_dim)
        .with_context(|| format!("reading {}", args.input.display()))?;
    if traj.series.truth_states.is_none() {
        bail!("{}: sweep needs ground-truth columns", args.input.display());
    }
    let dt = match (args.dt, traj.dt) {
        (Some(dt), _) | (None, Some(dt)) => dt,
        (None, None) => bail!("cannot infer dt from fewer than two samples; pass --dt"),
    };
    let directions = if args.directions.is_empty() {
        (1..=args.obs_dim).map(|k| format!("dir{k}")).collect()
    } else {
        args.directions.clone()
    };
    let grid = SweepGrid {
        q_var: grid_from(&args.q_db, "q-db")?.into_iter().map(eval::from_db).collect(),
        r_var: grid_from(&args.r_db, "r-db")?.into_iter().map(eval::from_db).collect(),
        alpha: args.alphas.clone(),
    };
    for &alpha in &grid.alpha {
        Chi2Config { alpha, dof: None }.validate()?;
    }
    let engines = [Engine::Kf, Engine::chi2(0.05), Engine::am(), Engine::em()];
    let table = eval::benchmark_table(
        &traj.series,
        &directions,
        |q, r| build_position_only_model(q, r, dt),
        &engines,
        &grid,
    )?;
    let lines = dataio::benchmark_table_lines(&table);
    for line in &lines {
        println!("{line}");
    }
    write_output(&args.table, args.format, lines, serde_json::to_value(&table.rows)?)?;
    if let Some(path) = &args.grid {
        dataio::write_table(path, dataio::sweep_table_lines(&table.sweeps))?;
    }
    Ok(())
}

fn cmd_fig2(args: &Fig2Args) -> Result<()> {
    let outliers = match args.panel {
        Panel::Clean => None,
        Panel::Low | Panel::High => Some(OutlierRegime {
            probability: 0.2,
            rayleigh_scale: if args.panel == Panel::Low { 3.0 } else { 30.0 },
            sign_mode: SignMode::Symmetric,
        }),
    };
    if args.trials == 0 {
        bail!("invalid parameter `trials`: must be at least 1");
    }
    let cfg = MseVsRConfig {
        q_var: eval::from_db(args.q_db),
        r_grid_db: grid_from(&args.r_db, "r-db")?,
        chi2_alphas: args.alphas.clone(),
        seed: args.seed,
        horizon: args.horizon,
        n_trials: args.trials,
        ..MseVsRConfig::reference(outliers)
    };
    let rows = eval::mse_vs_r_experiment(&cfg)?;
    write_output(&args.out, args.format, dataio::mse_vs_r_lines(&rows), serde_json::to_value(&rows)?)?;
    println!("panel={:?} rows={}", args.panel, rows.len());
    Ok(())
}

fn cmd_convergence(args: &ConvergenceArgs) -> Result<()> {
    let mut cfg = ConvergenceConfig::reference(args.scale);
    cfg.outliers.probability = args.p;
    cfg.r_var = args.r_var;
    cfg.q_var = eval::from_db(args.q_db);
    cfg.variant = args.variant;
    cfg.max_iters = args.iters;
    cfg.horizon = args.horizon;
    cfg.seed = args.seed;
    let report = eval::convergence_trace_experiment(&cfg)?;
    write_output(
        &args.out,
        args.format,
        dataio::convergence_lines(&report),
        serde_json::to_value(&report)?,
    )?;
    let summary = json!({
        "detected": report.traces.len(),
        "median_iters_to_stability": report.median_iters,
    });
    println!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Filter(args) => cmd_filter(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Fig2(args) => cmd_fig2(args),
        Command::Convergence(args) => cmd_convergence(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let _ = writeln!(std::io::stderr(), "error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
