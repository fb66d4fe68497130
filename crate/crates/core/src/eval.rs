//! Metrics, grid search and experiment drivers.
//!
//! Everything here is computed from estimates and ground truth only; engine
//! diagnostics never feed into a metric. Trials and grid points run in
//! parallel but results are always ordered by grid index. Runtime figures come
//! from a separate single-threaded re-run so they are not skewed by the pool.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::{GaussianBelief, DIFFUSE_VARIANCE};
use crate::oikf::{filter_series, Engine, OikfConfig, Variant};
use crate::ssmodel::{
    build_wna_model, inject_outliers, simulate_trajectory, ObservationSeries, OutlierSpec, SignMode, SystemModel,
};

/// dB value reported for an exactly-zero error.
pub const MSE_DB_FLOOR: f64 = -300.0;

pub fn to_db(value: f64) -> f64 {
    if value <= 0.0 {
        MSE_DB_FLOOR
    } else {
        10.0 * value.log10()
    }
}

pub fn from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Inclusive arithmetic range `start, start + step, …, ≤ stop`.
pub fn db_range(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    (0..count).map(|i| start + i as f64 * step).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub engine: String,
    /// `q_var`, `r_var` and engine knobs such as `alpha`.
    pub params: BTreeMap<String, f64>,
    pub dims: Vec<usize>,
    pub rmse_per_dim: Vec<f64>,
    pub mse_db_per_dim: Vec<f64>,
    /// Seconds per step; `None` when nothing was filtered.
    pub mean_step_runtime: Option<f64>,
    pub n_steps: usize,
}

impl MetricsReport {
    /// Mean linear MSE over the evaluated dimensions.
    pub fn mean_mse(&self) -> f64 {
        let sum: f64 = self.rmse_per_dim.iter().map(|r| r * r).sum();
        sum / self.rmse_per_dim.len() as f64
    }

    pub fn q_var(&self) -> Option<f64> {
        self.params.get("q_var").copied()
    }

    pub fn r_var(&self) -> Option<f64> {
        self.params.get("r_var").copied()
    }

    fn failed(engine: &str, params: BTreeMap<String, f64>, dims: &[usize], n_steps: usize) -> Self {
        Self {
            engine: engine.to_string(),
            params,
            dims: dims.to_vec(),
            rmse_per_dim: vec![f64::INFINITY; dims.len()],
            mse_db_per_dim: vec![f64::INFINITY; dims.len()],
            mean_step_runtime: None,
            n_steps,
        }
    }
}

fn metrics_from_means<'a>(
    means: impl ExactSizeIterator<Item = &'a DVector<f64>>,
    truth: &[DVector<f64>],
    eval_dims: &[usize],
    timings: &[f64],
) -> Result<MetricsReport> {
    if eval_dims.is_empty() {
        return Err(Error::Empty("evaluation dimensions"));
    }
    if means.len() != truth.len() {
        return Err(Error::dims("estimates vs truth length", truth.len(), means.len()));
    }
    if truth.is_empty() {
        return Err(Error::Empty("estimates"));
    }
    if !timings.is_empty() && timings.len() != truth.len() {
        return Err(Error::dims("timings length", truth.len(), timings.len()));
    }
    let mut sq_err = vec![0.0; eval_dims.len()];
    for (est, x) in means.zip(truth) {
        for (acc, &d) in sq_err.iter_mut().zip(eval_dims) {
            if d >= est.len() || d >= x.len() {
                return Err(Error::dims("evaluation dimension", format!("< {}", est.len().min(x.len())), d));
            }
            let e = est[d] - x[d];
            *acc += e * e;
        }
    }
    let steps = truth.len() as f64;
    let mse: Vec<f64> = sq_err.iter().map(|s| s / steps).collect();
    Ok(MetricsReport {
        engine: String::new(),
        params: BTreeMap::new(),
        dims: eval_dims.to_vec(),
        rmse_per_dim: mse.iter().map(|m| m.sqrt()).collect(),
        mse_db_per_dim: mse.iter().map(|&m| to_db(m)).collect(),
        mean_step_runtime: (!timings.is_empty()).then(|| timings.iter().sum::<f64>() / steps),
        n_steps: truth.len(),
    })
}

/// Per-dimension MSE/RMSE of posterior means against truth.
pub fn compute_metrics(
    estimates: &[GaussianBelief],
    truth: &[DVector<f64>],
    eval_dims: &[usize],
    timings: &[f64],
) -> Result<MetricsReport> {
    metrics_from_means(estimates.iter().map(|b| &b.mean), truth, eval_dims, timings)
}

/// Error of the raw observations, back-projected through `H⁺`.
pub fn passthrough_metrics(series: &ObservationSeries, model: &SystemModel, eval_dims: &[usize]) -> Result<MetricsReport> {
    let truth = series.truth_states.as_ref().ok_or(Error::Empty("ground truth"))?;
    let pinv = model
        .h()
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::param("H", e.to_string()))?;
    let means: Vec<DVector<f64>> = series.observations.iter().map(|y| &pinv * y).collect();
    let mut report = metrics_from_means(means.iter(), truth, eval_dims, &[])?;
    report.engine = "NOISY".to_string();
    Ok(report)
}

/// Starting belief pinned to a known state: the given entries are exact,
/// any remaining state components get the diffuse variance.
pub fn known_state_belief(state: &DVector<f64>, model: &SystemModel) -> GaussianBelief {
    let m = model.state_dim();
    let mut mean = DVector::zeros(m);
    let mut cov = DMatrix::zeros(m, m);
    for i in 0..m {
        match state.get(i) {
            Some(&v) => mean[i] = v,
            None => cov[(i, i)] = DIFFUSE_VARIANCE,
        }
    }
    GaussianBelief { mean, cov }
}

/// Filters `series` and scores it; the report carries the engine label.
///
/// Without an explicit `initial` belief the run starts from the first
/// ground-truth sample (see [`known_state_belief`]).
pub fn evaluate_engine(
    series: &ObservationSeries,
    model: &SystemModel,
    engine: &Engine,
    eval_dims: &[usize],
    initial: Option<&GaussianBelief>,
) -> Result<MetricsReport> {
    let truth = series.truth_states.as_ref().ok_or(Error::Empty("ground truth"))?;
    let start = match initial {
        Some(b) => b.clone(),
        None => known_state_belief(truth.first().ok_or(Error::Empty("series"))?, model),
    };
    let run = filter_series(series, model, engine, Some(&start))?;
    let mut report = compute_metrics(&run.estimates, truth, eval_dims, &run.step_seconds)?;
    report.engine = engine.label().to_string();
    Ok(report)
}

/// Parameter grid. `alpha` is only swept for the gating baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub q_var: Vec<f64>,
    pub r_var: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Default for SweepGrid {
    /// `q² ∈ [−30, 0] dB` step 5, `r² ∈ [−10, 30] dB` step 2, `alpha ∈ {0.001, 0.01, 0.05, 0.1}`.
    fn default() -> Self {
        Self {
            q_var: db_range(-30.0, 0.0, 5.0).into_iter().map(from_db).collect(),
            r_var: db_range(-10.0, 30.0, 2.0).into_iter().map(from_db).collect(),
            alpha: vec![0.001, 0.01, 0.05, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub q_var: f64,
    pub r_var: f64,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<GridPoint>,
    pub reports: Vec<MetricsReport>,
    pub best: usize,
}

impl SweepResult {
    pub fn best_report(&self) -> &MetricsReport {
        &self.reports[self.best]
    }

    pub fn best_point(&self) -> GridPoint {
        self.grid[self.best]
    }
}

/// Evaluates every grid point and picks the lowest position MSE.
///
/// A failing grid point is recorded with infinite error. Ties go to the
/// lowest `q`, then lowest `r`, then lowest `alpha`. The winning point is
/// re-run on the calling thread to obtain its runtime.
pub fn grid_search<B>(
    data: &ObservationSeries,
    model_builder: B,
    engine: &Engine,
    grid: &SweepGrid,
    eval_dims: &[usize],
) -> Result<SweepResult>
where
    B: Fn(f64, f64) -> Result<SystemModel> + Sync,
{
    if grid.q_var.is_empty() || grid.r_var.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    if data.truth_states.is_none() {
        return Err(Error::Empty("ground truth"));
    }
    let alphas: Vec<Option<f64>> = match engine {
        Engine::Chi2(cfg) if grid.alpha.is_empty() => vec![Some(cfg.alpha)],
        Engine::Chi2(_) => grid.alpha.iter().copied().map(Some).collect(),
        _ => vec![None],
    };
    let mut points = Vec::new();
    for &q_var in &grid.q_var {
        for &r_var in &grid.r_var {
            for &alpha in &alphas {
                points.push(GridPoint { q_var, r_var, alpha });
            }
        }
    }

    let point_engine = |point: &GridPoint| match (engine, point.alpha) {
        (Engine::Chi2(cfg), Some(alpha)) => Engine::Chi2(crate::baselines::Chi2Config { alpha, ..*cfg }),
        _ => *engine,
    };
    let point_params = |point: &GridPoint| {
        let mut params = BTreeMap::from([("q_var".to_string(), point.q_var), ("r_var".to_string(), point.r_var)]);
        if let Some(alpha) = point.alpha {
            params.insert("alpha".to_string(), alpha);
        }
        params
    };
    let run_point = |point: &GridPoint| -> MetricsReport {
        let params = point_params(point);
        let result = model_builder(point.q_var, point.r_var)
            .and_then(|model| evaluate_engine(data, &model, &point_engine(point), eval_dims, None));
        match result {
            Ok(mut report) => {
                report.params = params;
                report
            }
            Err(_) => MetricsReport::failed(engine.label(), params, eval_dims, data.len()),
        }
    };

    let mut reports: Vec<MetricsReport> = points.par_iter().map(run_point).collect();

    let key = |i: usize| {
        let mse = reports[i].mean_mse();
        (if mse.is_nan() { f64::INFINITY } else { mse }, points[i].q_var, points[i].r_var, points[i].alpha.unwrap_or(0.0))
    };
    let best = (0..points.len())
        .min_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap_or(0);

    if reports[best].mean_mse().is_finite() {
        reports[best] = run_point(&points[best]);
    }
    Ok(SweepResult {
        grid: points,
        reports,
        best,
    })
}

/// Synthetic outlier regime for the MSE-vs-`r²` experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierRegime {
    pub probability: f64,
    pub rayleigh_scale: f64,
    pub sign_mode: SignMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseVsRConfig {
    pub q_var: f64,
    pub r_grid_db: Vec<f64>,
    pub dt: f64,
    pub outliers: Option<OutlierRegime>,
    /// Engines run at the generating `(q, r)`. A gating engine is run once
    /// per `chi2_alphas` entry and reported at its best alpha.
    pub engines: Vec<Engine>,
    pub chi2_alphas: Vec<f64>,
    pub seed: u64,
    pub horizon: usize,
    pub n_trials: usize,
}

impl MseVsRConfig {
    /// WNA model at `q² = −10 dB`, `r² ∈ [−10, 25] dB` step 5, engines KF,
    /// OIKF-AM, OIKF-EM, CHI2.
    pub fn reference(outliers: Option<OutlierRegime>) -> Self {
        Self {
            q_var: from_db(-10.0),
            r_grid_db: db_range(-10.0, 25.0, 5.0),
            dt: 1.0,
            outliers,
            engines: vec![Engine::Kf, Engine::am(), Engine::em(), Engine::chi2(0.05)],
            chi2_alphas: vec![0.001, 0.01, 0.05, 0.1, 0.2],
            seed: 0,
            horizon: 2000,
            n_trials: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseVsRRow {
    pub engine: String,
    pub r2_db: f64,
    pub mse_db: f64,
    /// Selected significance level for the gating baseline.
    pub alpha: Option<f64>,
}

/// Deterministic per-purpose seed derived from a base seed and indices.
pub fn derive_seed(base: u64, r_index: usize, trial: usize, purpose: u64) -> u64 {
    base ^ ((r_index as u64) << 40) ^ ((trial as u64) << 8) ^ purpose
}

fn synthetic_trial(model: &SystemModel, cfg: &MseVsRConfig, r_index: usize, trial: usize) -> Result<ObservationSeries> {
    let x0 = DVector::zeros(model.state_dim());
    let clean = simulate_trajectory(model, &x0, cfg.horizon, cfg.dt, derive_seed(cfg.seed, r_index, trial, 1))?;
    match cfg.outliers {
        None => Ok(clean),
        Some(regime) => inject_outliers(
            &clean,
            &OutlierSpec::new(
                regime.probability,
                regime.rayleigh_scale,
                regime.sign_mode,
                derive_seed(cfg.seed, r_index, trial, 2),
            )?,
        ),
    }
}

/// Position MSE (dB, averaged over trials before conversion) for each engine
/// and observation-noise level.
pub fn mse_vs_r_experiment(cfg: &MseVsRConfig) -> Result<Vec<MseVsRRow>> {
    if cfg.n_trials == 0 {
        return Err(Error::param("trials", "must be at least 1"));
    }
    if cfg.r_grid_db.is_empty() || cfg.engines.is_empty() {
        return Err(Error::Empty("experiment grid"));
    }
    for engine in &cfg.engines {
        engine.validate()?;
    }
    // Expand engines into concrete runs (gating once per alpha).
    let mut runs: Vec<(usize, Engine)> = Vec::new();
    for (slot, engine) in cfg.engines.iter().enumerate() {
        match engine {
            Engine::Chi2(base) if !cfg.chi2_alphas.is_empty() => {
                for &alpha in &cfg.chi2_alphas {
                    runs.push((slot, Engine::Chi2(crate::baselines::Chi2Config { alpha, ..*base })));
                }
            }
            other => runs.push((slot, *other)),
        }
    }

    let mut rows = Vec::new();
    for (r_index, &r_db) in cfg.r_grid_db.iter().enumerate() {
        let model = build_wna_model(cfg.q_var, from_db(r_db), cfg.dt)?;
        let per_trial: Vec<Vec<f64>> = (0..cfg.n_trials)
            .into_par_iter()
            .map(|trial| -> Result<Vec<f64>> {
                let series = synthetic_trial(&model, cfg, r_index, trial)?;
                let start = known_state_belief(&DVector::zeros(model.state_dim()), &model);
                runs.iter()
                    .map(|(_, engine)| evaluate_engine(&series, &model, engine, &[0], Some(&start)).map(|r| r.mean_mse()))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let mean_mse: Vec<f64> = (0..runs.len())
            .map(|j| per_trial.iter().map(|t| t[j]).sum::<f64>() / cfg.n_trials as f64)
            .collect();

        for (slot, engine) in cfg.engines.iter().enumerate() {
            let (best_mse, alpha) = runs
                .iter()
                .zip(&mean_mse)
                .filter(|((s, _), _)| *s == slot)
                .map(|((_, e), &mse)| {
                    let alpha = match e {
                        Engine::Chi2(c) => Some(c.alpha),
                        _ => None,
                    };
                    (mse, alpha)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .expect("every engine has at least one run");
            rows.push(MseVsRRow {
                engine: engine.label().to_string(),
                r2_db: r_db,
                mse_db: to_db(best_mse),
                alpha,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub q_var: f64,
    pub r_var: f64,
    pub dt: f64,
    pub outliers: OutlierRegime,
    pub variant: Variant,
    pub max_iters: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Relative change under which an estimate counts as settled.
    pub stability: f64,
}

impl ConvergenceConfig {
    pub fn reference(rayleigh_scale: f64) -> Self {
        Self {
            q_var: from_db(-10.0),
            r_var: 1.0,
            dt: 1.0,
            outliers: OutlierRegime {
                probability: 0.2,
                rayleigh_scale,
                sign_mode: SignMode::Symmetric,
            },
            variant: Variant::Am,
            max_iters: 10,
            horizon: 2000,
            seed: 0,
            stability: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierTrace {
    pub time_index: usize,
    pub dim: usize,
    pub gamma_trace: Vec<f64>,
    pub iters_to_stability: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub traces: Vec<OutlierTrace>,
    pub median_iters: Option<f64>,
}

/// First iteration `i ≥ 1` whose estimate differs from the previous one by
/// less than `stability` (relative); the trace length if none does.
pub fn iterations_to_stability(trace: &[f64], stability: f64) -> usize {
    (1..trace.len())
        .find(|&i| {
            let (a, b) = (trace[i - 1], trace[i]);
            let scale = a.abs().max(b.abs());
            scale == 0.0 || (b - a).abs() < stability * scale
        })
        .unwrap_or(trace.len())
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len().is_multiple_of(2) {
        0.5 * (values[mid - 1] + values[mid])
    } else {
        values[mid]
    })
}

/// `γ̂²` iteration traces at every detected outlier of a synthetic run.
pub fn convergence_trace_experiment(cfg: &ConvergenceConfig) -> Result<ConvergenceReport> {
    let model = build_wna_model(cfg.q_var, cfg.r_var, cfg.dt)?;
    let clean = simulate_trajectory(&model, &DVector::zeros(2), cfg.horizon, cfg.dt, derive_seed(cfg.seed, 0, 0, 1))?;
    let spec = OutlierSpec::new(
        cfg.outliers.probability,
        cfg.outliers.rayleigh_scale,
        cfg.outliers.sign_mode,
        derive_seed(cfg.seed, 0, 0, 2),
    )?;
    let series = inject_outliers(&clean, &spec)?;
    let engine = Engine::Oikf(OikfConfig {
        variant: cfg.variant,
        max_iters: cfg.max_iters,
        tol: 0.0,
        record_trace: true,
    });
    let start = known_state_belief(&DVector::zeros(2), &model);
    let run = filter_series(&series, &model, &engine, Some(&start))?;
    Ok(collect_traces(&run.diagnostics, cfg.stability))
}

/// Extracts per-dimension traces from diagnostics with a detection.
pub fn collect_traces(diagnostics: &[crate::oikf::StepDiagnostics], stability: f64) -> ConvergenceReport {
    let mut traces = Vec::new();
    for (time_index, diag) in diagnostics.iter().enumerate() {
        let Some(trace) = &diag.gamma_trace else { continue };
        for (dim, _) in diag.detected.iter().enumerate().filter(|(_, &d)| d) {
            let gamma_trace: Vec<f64> = trace.iter().map(|g| g[dim]).collect();
            traces.push(OutlierTrace {
                time_index,
                dim,
                iters_to_stability: iterations_to_stability(&gamma_trace, stability),
                gamma_trace,
            });
        }
    }
    let mut iters: Vec<f64> = traces.iter().map(|t| t.iters_to_stability as f64).collect();
    ConvergenceReport {
        median_iters: median(&mut iters),
        traces,
    }
}

/// One engine row of the per-direction benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub engine: String,
    /// Best-grid-point report per direction.
    pub per_direction: Vec<MetricsReport>,
    /// Mean of the per-direction single-threaded step times, in ms.
    pub runtime_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub directions: Vec<String>,
    pub rows: Vec<BenchmarkRow>,
    /// Full sweep per engine (outer) and direction (inner).
    pub sweeps: Vec<(String, Vec<SweepResult>)>,
}

impl BenchmarkTable {
    pub fn row(&self, engine: &str) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.engine == engine)
    }

    pub fn header(&self) -> Vec<String> {
        let mut header = vec!["engine".to_string()];
        for name in &self.directions {
            header.push(format!("{name}_rmse_m"));
            header.push(format!("{name}_mse_db"));
        }
        header.push("runtime_ms".to_string());
        header
    }
}

/// Per-direction grid search for every engine plus the raw-observation row.
///
/// Each observation component of `series` is filtered separately with the
/// scalar model produced by `model_builder`.
pub fn benchmark_table<B>(
    series: &ObservationSeries,
    direction_names: &[String],
    model_builder: B,
    engines: &[Engine],
    grid: &SweepGrid,
) -> Result<BenchmarkTable>
where
    B: Fn(f64, f64) -> Result<SystemModel> + Sync,
{
    let n = series.obs_dim().ok_or(Error::Empty("series"))?;
    if direction_names.len() != n {
        return Err(Error::dims("direction names", n, direction_names.len()));
    }
    let directions: Vec<ObservationSeries> = (0..n).map(|k| series.direction(k)).collect::<Result<_>>()?;

    let reference_model = model_builder(grid.q_var[0], grid.r_var[0])?;
    let passthrough = directions
        .iter()
        .map(|d| passthrough_metrics(d, &reference_model, &[0]))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = vec![BenchmarkRow {
        engine: "NOISY".to_string(),
        per_direction: passthrough,
        runtime_ms: None,
    }];
    let mut sweeps = Vec::new();
    for engine in engines {
        let results = directions
            .iter()
            .map(|d| grid_search(d, &model_builder, engine, grid, &[0]))
            .collect::<Result<Vec<_>>>()?;
        let best: Vec<MetricsReport> = results.iter().map(|s| s.best_report().clone()).collect();
        let times: Vec<f64> = best.iter().filter_map(|r| r.mean_step_runtime).collect();
        rows.push(BenchmarkRow {
            engine: engine.label().to_string(),
            runtime_ms: (!times.is_empty()).then(|| 1e3 * times.iter().sum::<f64>() / times.len() as f64),
            per_direction: best,
        });
        sweeps.push((engine.label().to_string(), results));
    }
    Ok(BenchmarkTable {
        directions: direction_names.to_vec(),
        rows,
        sweeps,
    })
}
