//! Outlier-insensitive Kalman update.
//!
//! Every observation component `k` carries an additive outlier
//! `u_k ~ N(0, γ_k²)` whose variance has a flat prior. Inside the update the
//! variance is re-estimated a few times against a fixed prior:
//!
//! ```text
//! γ̂_k² = max(s_k − r_k², 0)
//! Γ    = diag(r² + γ̂²)
//! (x̂, Σ) = update(prior, y, obs_cov = Γ)
//! ```
//!
//! where the statistic `s_k` is the squared residual `(y − H·x̂)_k²` for
//! alternating maximization (AM) or the posterior expectation
//! `E[(y − H·x)_k²]` for expectation maximization (EM). A zero `γ̂²` in every
//! component reproduces the plain Kalman update.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::{self, Chi2Config};
use crate::error::{Error, Result};
use crate::kalman::{self, GaussianBelief, DIFFUSE_VARIANCE};
use crate::ssmodel::{ObservationSeries, SystemModel};

/// Upper clamp on the inflated noise, relative to the largest `r_k²`.
pub const MAX_INFLATION: f64 = 1e12;

/// Closed-form variance estimate from one sample: `max(y² − r², 0)`.
pub fn nuv_gamma_mle(y: f64, r_sq: f64) -> f64 {
    (y * y - r_sq).max(0.0)
}

/// MAP estimate of the outlier itself: `y·γ̂²/(γ̂² + r²)`.
pub fn nuv_u_map(y: f64, r_sq: f64) -> f64 {
    let gamma_sq = nuv_gamma_mle(y, r_sq);
    if gamma_sq == 0.0 {
        0.0
    } else {
        y * gamma_sq / (gamma_sq + r_sq)
    }
}

/// Equivalent cost `−log p(y)` after maximizing over `γ²`: quadratic inside
/// `|y| < r`, logarithmic outside.
pub fn nuv_loss(y: f64, r_sq: f64) -> f64 {
    if y * y < r_sq {
        y * y / (2.0 * r_sq) + 0.5 * r_sq.ln()
    } else {
        y.abs().ln() + 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "AM")]
    Am,
    #[serde(rename = "EM")]
    Em,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "am" => Ok(Variant::Am),
            "em" => Ok(Variant::Em),
            other => Err(format!("unknown variant `{other}` (am|em)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OikfConfig {
    pub variant: Variant,
    pub max_iters: usize,
    /// Early exit once the largest relative change of `γ̂²` drops below this.
    pub tol: f64,
    pub record_trace: bool,
}

impl OikfConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            max_iters: 10,
            tol: 1e-6,
            record_trace: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::param("iters", "must be at least 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::param("tol", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-step record of the outlier estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub gamma_sq: Vec<f64>,
    /// Statistic that drove the final estimate: squared residual (AM) or
    /// posterior second moment of the residual (EM).
    pub nu_sq: Vec<f64>,
    pub iters_used: usize,
    /// `γ̂²` after every iteration, when tracing is on.
    pub gamma_trace: Option<Vec<Vec<f64>>>,
    pub detected: Vec<bool>,
    /// Set by the gating baseline when the observation was discarded.
    pub rejected: bool,
}

impl StepDiagnostics {
    pub(crate) fn nominal(n: usize) -> Self {
        Self {
            gamma_sq: vec![0.0; n],
            nu_sq: vec![0.0; n],
            iters_used: 1,
            gamma_trace: None,
            detected: vec![false; n],
            rejected: false,
        }
    }

    pub fn any_detected(&self) -> bool {
        self.detected.iter().any(|&d| d)
    }
}

/// `E[x·xᵀ] = Σ + x̂·x̂ᵀ`.
pub fn em_second_moment(posterior: &GaussianBelief) -> DMatrix<f64> {
    let mut moment = &posterior.cov + &posterior.mean * posterior.mean.transpose();
    kalman::symmetrize(&mut moment);
    moment
}

/// Per-component `E[(y_k − (H·x)_k)²]` under the posterior, evaluated as
/// `(y − H·x̂)_k² + (H·Σ·Hᵀ)_kk`.
pub fn em_nu_sq(y: &DVector<f64>, posterior: &GaussianBelief, model: &SystemModel) -> DVector<f64> {
    let h = model.h();
    let residual = y - h * &posterior.mean;
    let spread = h * &posterior.cov;
    DVector::from_iterator(
        y.len(),
        (0..y.len()).map(|k| {
            let var = spread.row(k).dot(&h.row(k)).max(0.0);
            residual[k] * residual[k] + var
        }),
    )
}

fn squared_residual(y: &DVector<f64>, mean: &DVector<f64>, model: &SystemModel) -> DVector<f64> {
    (y - model.h() * mean).map(|v| v * v)
}

fn relative_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter()
        .zip(new)
        .map(|(&a, &b)| {
            let scale = a.abs().max(b.abs());
            if scale == 0.0 {
                0.0
            } else {
                (b - a).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// One outlier-insensitive update against a fixed prior.
///
/// AM starts from the innovation `y − H·x⁻`; EM starts from the posterior
/// computed with `Γ = R`. Each iteration re-estimates `γ̂²`, rebuilds `Γ` and
/// re-runs the Kalman update from the same prior.
pub fn oikf_step(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &SystemModel,
    cfg: &OikfConfig,
) -> Result<(GaussianBelief, StepDiagnostics)> {
    cfg.validate()?;
    model.require_positive_obs_noise()?;
    let n = model.obs_dim();
    if y.len() != n {
        return Err(Error::dims("observation", n, y.len()));
    }
    let r = model.r_diag();
    let ceiling = MAX_INFLATION * r.max();

    // Estimate that feeds the first statistic.
    let mut current = match cfg.variant {
        Variant::Am => prior.clone(),
        Variant::Em => kalman::update(prior, y, model, &r)?.0,
    };
    let mut gamma_sq = vec![0.0; n];
    let mut nu_sq = vec![0.0; n];
    let mut trace = cfg.record_trace.then(Vec::new);
    let mut iters_used = 0;

    for iter in 0..cfg.max_iters {
        let stat = match cfg.variant {
            Variant::Am => squared_residual(y, &current.mean, model),
            Variant::Em => em_nu_sq(y, &current, model),
        };
        let next: Vec<f64> = (0..n)
            .map(|k| {
                let inflated = (r[k] + nuv_gamma_mle_from_sq(stat[k], r[k])).min(ceiling);
                (inflated - r[k]).max(0.0)
            })
            .collect();
        let gamma_cov = DVector::from_iterator(n, (0..n).map(|k| r[k] + next[k]));
        current = kalman::update(prior, y, model, &gamma_cov)?.0;
        iters_used = iter + 1;

        let change = relative_change(&gamma_sq, &next);
        nu_sq = stat.iter().copied().collect();
        gamma_sq = next;
        if let Some(trace) = trace.as_mut() {
            trace.push(gamma_sq.clone());
        }
        if iter > 0 && change < cfg.tol {
            break;
        }
    }

    let detected = gamma_sq.iter().map(|&g| g > 0.0).collect();
    Ok((
        current,
        StepDiagnostics {
            gamma_sq,
            nu_sq,
            iters_used,
            gamma_trace: trace,
            detected,
            rejected: false,
        },
    ))
}

fn nuv_gamma_mle_from_sq(stat: f64, r_sq: f64) -> f64 {
    (stat - r_sq).max(0.0)
}

/// Update rule applied after each predict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Engine {
    Kf,
    Oikf(OikfConfig),
    Chi2(Chi2Config),
}

impl Engine {
    pub fn label(&self) -> &'static str {
        match self {
            Engine::Kf => "KF",
            Engine::Oikf(OikfConfig { variant: Variant::Am, .. }) => "OIKF-AM",
            Engine::Oikf(OikfConfig { variant: Variant::Em, .. }) => "OIKF-EM",
            Engine::Chi2(_) => "CHI2",
        }
    }

    pub fn am() -> Self {
        Engine::Oikf(OikfConfig::new(Variant::Am))
    }

    pub fn em() -> Self {
        Engine::Oikf(OikfConfig::new(Variant::Em))
    }

    pub fn chi2(alpha: f64) -> Self {
        Engine::Chi2(Chi2Config { alpha, dof: None })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Engine::Kf => Ok(()),
            Engine::Oikf(cfg) => cfg.validate(),
            Engine::Chi2(cfg) => cfg.validate(),
        }
    }

    /// Predict-free update for one step.
    pub fn step(
        &self,
        prior: &GaussianBelief,
        y: &DVector<f64>,
        model: &SystemModel,
    ) -> Result<(GaussianBelief, StepDiagnostics)> {
        match self {
            Engine::Kf => {
                let (post, _) = kalman::update(prior, y, model, &model.r_diag())?;
                Ok((post, StepDiagnostics::nominal(model.obs_dim())))
            }
            Engine::Oikf(cfg) => oikf_step(prior, y, model, cfg),
            Engine::Chi2(cfg) => baselines::chi2_gated_update(prior, y, model, cfg),
        }
    }
}

/// Output of a filtering fold.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub estimates: Vec<GaussianBelief>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Wall-clock seconds spent in predict + update, per step.
    pub step_seconds: Vec<f64>,
}

impl FilterRun {
    pub fn mean_step_seconds(&self) -> f64 {
        if self.step_seconds.is_empty() {
            0.0
        } else {
            self.step_seconds.iter().sum::<f64>() / self.step_seconds.len() as f64
        }
    }
}

/// Causal fold of predict + engine update over the series.
///
/// Without an explicit `initial` belief the filter starts from
/// [`GaussianBelief::diffuse_from_observation`] on the first sample.
pub fn filter_series(
    series: &ObservationSeries,
    model: &SystemModel,
    engine: &Engine,
    initial: Option<&GaussianBelief>,
) -> Result<FilterRun> {
    engine.validate()?;
    let len = series.len();
    let mut run = FilterRun {
        estimates: Vec::with_capacity(len),
        diagnostics: Vec::with_capacity(len),
        step_seconds: Vec::with_capacity(len),
    };
    let Some(first) = series.observations.first() else {
        return Ok(run);
    };
    if first.len() != model.obs_dim() {
        return Err(Error::dims("series observation width", model.obs_dim(), first.len()));
    }
    let mut belief = match initial {
        Some(b) => b.clone(),
        None => GaussianBelief::diffuse_from_observation(first, model, DIFFUSE_VARIANCE)?,
    };
    for (index, y) in series.observations.iter().enumerate() {
        let started = Instant::now();
        let (post, diag) = kalman::predict(&belief, model)
            .and_then(|prior| engine.step(&prior, y, model))
            .map_err(|e| Error::StepFailed {
                index,
                source: Box::new(e),
            })?;
        run.step_seconds.push(started.elapsed().as_secs_f64());
        run.estimates.push(post.clone());
        run.diagnostics.push(diag);
        belief = post;
    }
    Ok(run)
}
