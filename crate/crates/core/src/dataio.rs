//! CSV I/O for trajectories, filter output and result tables.
//!
//! Trajectory schema (one comment line, then a header):
//!
//! ```text
//! # units: t [s]; y, gt [m] (velocity states [m/s]); mask 0/1
//! t,y_1,…,y_n[,gt_1,…,gt_m][,mask_1,…,mask_n]
//! ```
//!
//! `t` must increase strictly and every cell must be present. Floats are
//! written with 17 significant digits so a write/read round trip is exact.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::eval::{BenchmarkTable, ConvergenceReport, MetricsReport, MseVsRRow, SweepResult};
use crate::oikf::FilterRun;
use crate::ssmodel::ObservationSeries;

pub const UNITS_COMMENT: &str = "# units: t [s]; y, gt [m] (velocity states [m/s]); mask 0/1";

/// 17 significant digits, scientific notation.
pub fn format_float(value: f64) -> String {
    format!("{value:.16e}")
}

/// A parsed trajectory file.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub series: ObservationSeries,
    /// Median spacing of successive timestamps.
    pub dt: Option<f64>,
}

fn numbered(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}_{i}"))
}

/// Writes `series` in the trajectory schema (LF line endings).
pub fn write_trajectory(series: &ObservationSeries, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_trajectory_to(series, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_trajectory_to<W: Write>(series: &ObservationSeries, out: &mut W) -> Result<()> {
    let n = series.obs_dim().unwrap_or(0);
    let m = series.state_dim().unwrap_or(0);
    let has_truth = series.truth_states.is_some() && m > 0;
    let has_mask = series.outlier_mask.is_some() && n > 0;

    let mut header = vec!["t".to_string()];
    header.extend(numbered("y", n));
    if has_truth {
        header.extend(numbered("gt", m));
    }
    if has_mask {
        header.extend(numbered("mask", n));
    }
    writeln!(out, "{UNITS_COMMENT}")?;
    writeln!(out, "{}", header.join(","))?;

    for i in 0..series.len() {
        let mut cells = vec![format_float(series.times[i])];
        cells.extend(series.observations[i].iter().map(|&v| format_float(v)));
        if let (true, Some(truth)) = (has_truth, &series.truth_states) {
            cells.extend(truth[i].iter().map(|&v| format_float(v)));
        }
        if let (true, Some(mask)) = (has_mask, &series.outlier_mask) {
            cells.extend(mask[i].iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

struct Layout {
    has_truth: bool,
    has_mask: bool,
}

fn parse_header(path: &Path, header: &csv::StringRecord, n: usize, m: usize) -> Result<Layout> {
    let names: Vec<&str> = header.iter().collect();
    let mismatch = |reason: String| Error::ColumnMismatch {
        path: path.to_path_buf(),
        reason,
    };
    let mut expected: Vec<String> = vec!["t".into()];
    expected.extend(numbered("y", n));
    if names.len() < expected.len() || names[..expected.len()] != expected.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        return Err(mismatch(format!("header must start with {}, found {}", expected.join(","), names.join(","))));
    }
    let rest = &names[expected.len()..];
    let truth_cols = rest.iter().take_while(|c| c.starts_with("gt_")).count();
    let mask_cols = rest.len() - truth_cols;
    let has_truth = truth_cols > 0;
    let has_mask = mask_cols > 0;
    if has_truth && truth_cols != m {
        return Err(mismatch(format!("expected {m} ground-truth columns, found {truth_cols}")));
    }
    let mut full = expected;
    if has_truth {
        full.extend(numbered("gt", m));
    }
    if has_mask {
        full.extend(numbered("mask", n));
    }
    if full.len() != names.len() || full.iter().zip(&names).any(|(a, b)| a != b) {
        return Err(mismatch(format!("expected header {}, found {}", full.join(","), names.join(","))));
    }
    Ok(Layout { has_truth, has_mask })
}

/// Reads a trajectory with `n` observation and (if present) `m` truth columns.
pub fn read_trajectory(path: &Path, n: usize, m: usize) -> Result<Trajectory> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader.headers()?.clone();
    let layout = parse_header(path, &header, n, m)?;
    let width = header.len();

    let malformed = |line: u64, reason: String| Error::MalformedRow {
        path: PathBuf::from(path),
        line,
        reason,
    };
    let mut times = Vec::new();
    let mut observations = Vec::new();
    let mut truth = Vec::new();
    let mut mask = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != width {
            return Err(malformed(line, format!("expected {width} cells, found {}", record.len())));
        }
        let mut values = Vec::with_capacity(width);
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell
                .parse()
                .map_err(|_| malformed(line, format!("column `{}`: cannot parse `{cell}`", &header[col])))?;
            if !value.is_finite() {
                return Err(malformed(line, format!("column `{}`: non-finite value", &header[col])));
            }
            values.push(value);
        }
        let t = values[0];
        if let Some(&previous) = times.last() {
            if t <= previous {
                return Err(Error::NonIncreasingTime {
                    path: path.to_path_buf(),
                    line,
                    time: t,
                    previous,
                });
            }
        }
        times.push(t);
        observations.push(DVector::from_column_slice(&values[1..=n]));
        let mut next = 1 + n;
        if layout.has_truth {
            truth.push(DVector::from_column_slice(&values[next..next + m]));
            next += m;
        }
        if layout.has_mask {
            let row = values[next..next + n]
                .iter()
                .map(|&v| match v {
                    0.0 => Ok(false),
                    1.0 => Ok(true),
                    other => Err(malformed(line, format!("mask value {other} is not 0 or 1"))),
                })
                .collect::<Result<Vec<_>>>()?;
            mask.push(row);
        }
    }

    let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let dt = crate::eval::median(&mut gaps);
    let series = ObservationSeries::new(
        times,
        observations,
        layout.has_truth.then_some(truth),
        layout.has_mask.then_some(mask),
    )?;
    Ok(Trajectory { series, dt })
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for line in lines {
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn opt(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

/// Long-format table: one row per report and evaluated dimension.
pub fn metrics_table_lines(reports: &[MetricsReport]) -> Vec<String> {
    let mut lines = vec!["engine,q_var,r_var,dim,rmse,mse_db,runtime_ms".to_string()];
    for report in reports {
        for (i, dim) in report.dims.iter().enumerate() {
            lines.push(format!(
                "{},{},{},{},{},{},{}",
                report.engine,
                opt(report.q_var()),
                opt(report.r_var()),
                dim,
                report.rmse_per_dim[i],
                report.mse_db_per_dim[i],
                opt(report.mean_step_runtime.map(|s| s * 1e3)),
            ));
        }
    }
    lines
}

pub fn write_metrics_table(reports: &[MetricsReport], path: &Path) -> Result<()> {
    write_lines(path, metrics_table_lines(reports))
}

/// Every grid point of a sweep, with the selected point flagged.
pub fn sweep_table_lines(engine_sweeps: &[(String, Vec<SweepResult>)]) -> Vec<String> {
    let mut lines = vec!["engine,direction,q_var,r_var,alpha,rmse,mse_db,best".to_string()];
    for (engine, per_direction) in engine_sweeps {
        for (direction, sweep) in per_direction.iter().enumerate() {
            for (i, (point, report)) in sweep.grid.iter().zip(&sweep.reports).enumerate() {
                lines.push(format!(
                    "{engine},{direction},{},{},{},{},{},{}",
                    point.q_var,
                    point.r_var,
                    opt(point.alpha),
                    report.rmse_per_dim[0],
                    report.mse_db_per_dim[0],
                    u8::from(i == sweep.best),
                ));
            }
        }
    }
    lines
}

/// Wide summary: `engine, <dir>_rmse_m, <dir>_mse_db, …, runtime_ms`.
pub fn benchmark_table_lines(table: &BenchmarkTable) -> Vec<String> {
    let mut lines = vec![table.header().join(",")];
    for row in &table.rows {
        let mut cells = vec![row.engine.clone()];
        for report in &row.per_direction {
            cells.push(format!("{:.4}", report.rmse_per_dim[0]));
            cells.push(format!("{:.4}", report.mse_db_per_dim[0]));
        }
        cells.push(row.runtime_ms.map(|v| format!("{v:.4}")).unwrap_or_default());
        lines.push(cells.join(","));
    }
    lines
}

pub fn mse_vs_r_lines(rows: &[MseVsRRow]) -> Vec<String> {
    let mut lines = vec!["engine,r2_db,mse_db".to_string()];
    lines.extend(rows.iter().map(|r| format!("{},{},{}", r.engine, r.r2_db, r.mse_db)));
    lines
}

pub fn convergence_lines(report: &ConvergenceReport) -> Vec<String> {
    let mut lines = vec!["time_index,dim,iteration,gamma_sq,iters_to_stability".to_string()];
    for trace in &report.traces {
        for (iteration, gamma) in trace.gamma_trace.iter().enumerate() {
            lines.push(format!(
                "{},{},{},{},{}",
                trace.time_index, trace.dim, iteration, gamma, trace.iters_to_stability
            ));
        }
    }
    lines
}

pub fn write_table(path: &Path, lines: Vec<String>) -> Result<()> {
    write_lines(path, lines)
}

/// `t, x_1…x_m, var_1…var_m` (posterior mean and covariance diagonal).
pub fn estimates_lines(times: &[f64], run: &FilterRun) -> Vec<String> {
    let m = run.estimates.first().map(|b| b.dim()).unwrap_or(0);
    let mut header = vec!["t".to_string()];
    header.extend(numbered("x", m));
    header.extend(numbered("var", m));
    let mut lines = vec![header.join(",")];
    for (t, belief) in times.iter().zip(&run.estimates) {
        let mut cells = vec![format_float(*t)];
        cells.extend(belief.mean.iter().map(|&v| format_float(v)));
        cells.extend(belief.cov.diagonal().iter().map(|&v| format_float(v)));
        lines.push(cells.join(","));
    }
    lines
}

/// `t, gamma_sq_k…, iters, detected_k…, rejected[, trace_i_k…]`.
///
/// With traces, iteration columns run to the longest trace and shorter
/// traces are left blank.
pub fn diagnostics_lines(times: &[f64], run: &FilterRun, with_trace: bool) -> Vec<String> {
    let n = run.diagnostics.first().map(|d| d.gamma_sq.len()).unwrap_or(0);
    let max_iters = if with_trace {
        run.diagnostics
            .iter()
            .filter_map(|d| d.gamma_trace.as_ref().map(Vec::len))
            .max()
            .unwrap_or(0)
    } else {
        0
    };
    let mut header = vec!["t".to_string()];
    header.extend(numbered("gamma_sq", n));
    header.push("iters".into());
    header.extend(numbered("detected", n));
    header.push("rejected".into());
    for i in 0..max_iters {
        header.extend((1..=n).map(|k| format!("trace_{i}_{k}")));
    }
    let mut lines = vec![header.join(",")];
    for (t, diag) in times.iter().zip(&run.diagnostics) {
        let mut cells = vec![format_float(*t)];
        cells.extend(diag.gamma_sq.iter().map(|&v| format_float(v)));
        cells.push(diag.iters_used.to_string());
        cells.extend(diag.detected.iter().map(|&d| u8::from(d).to_string()));
        cells.push(u8::from(diag.rejected).to_string());
        let trace = diag.gamma_trace.as_deref().unwrap_or(&[]);
        for i in 0..max_iters {
            match trace.get(i) {
                Some(g) => cells.extend(g.iter().map(|&v| format_float(v))),
                None => cells.extend(std::iter::repeat_n(String::new(), n)),
            }
        }
        lines.push(cells.join(","));
    }
    lines
}
