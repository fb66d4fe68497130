//! Chi-squared innovation gating.
//!
//! The normalized innovation `d = Δyᵀ·S⁻¹·Δy` is compared with the upper
//! `alpha` quantile of χ²(n). Observations above the threshold are discarded
//! and the step falls back to prediction only.

use std::cell::Cell;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::kalman::{self, GaussianBelief};
use crate::oikf::StepDiagnostics;
use crate::ssmodel::SystemModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chi2Config {
    /// Significance level of the joint test.
    pub alpha: f64,
    /// Degrees of freedom; `None` uses the observation dimension.
    pub dof: Option<usize>,
}

impl Default for Chi2Config {
    fn default() -> Self {
        Self { alpha: 0.05, dof: None }
    }
}

impl Chi2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::param("alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        if self.dof == Some(0) {
            return Err(Error::param("dof", "must be at least 1"));
        }
        Ok(())
    }
}

/// Wilson–Hilferty cube-root approximation of the upper quantile.
pub fn wilson_hilferty(dof: usize, alpha: f64) -> f64 {
    let k = dof as f64;
    let z = Normal::new(0.0, 1.0).expect("unit normal").inverse_cdf(1.0 - alpha);
    let c = 2.0 / (9.0 * k);
    k * (1.0 - c + z * c.sqrt()).max(1e-3).powi(3)
}

thread_local! {
    static LAST_THRESHOLD: Cell<(usize, u64, f64)> = const { Cell::new((0, 0, f64::NAN)) };
}

/// Upper-tail χ² quantile: `P(X > t) = alpha` for `X ~ χ²(dof)`.
///
/// Starts from [`wilson_hilferty`] and polishes with Newton steps on the
/// exact survival function.
pub fn chi2_threshold(dof: usize, alpha: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::param("dof", "must be at least 1"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    let (cached_dof, cached_alpha, cached) = LAST_THRESHOLD.with(Cell::get);
    if cached_dof == dof && cached_alpha == alpha.to_bits() {
        return Ok(cached);
    }

    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::param("dof", e.to_string()))?;
    let mut x = wilson_hilferty(dof, alpha);
    for _ in 0..50 {
        let density = dist.pdf(x);
        if !(density > 0.0) {
            break;
        }
        let next = (x + (dist.sf(x) - alpha) / density).max(0.5 * x);
        let done = (next - x).abs() <= 1e-13 * x;
        x = next;
        if done {
            break;
        }
    }
    LAST_THRESHOLD.with(|c| c.set((dof, alpha.to_bits(), x)));
    Ok(x)
}

/// Gated update: standard Kalman update if `d ≤ threshold`, otherwise the
/// prior is returned unchanged (mean and covariance).
pub fn chi2_gated_update(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &SystemModel,
    cfg: &Chi2Config,
) -> Result<(GaussianBelief, StepDiagnostics)> {
    cfg.validate()?;
    let n = model.obs_dim();
    if y.len() != n {
        return Err(Error::dims("observation", n, y.len()));
    }
    let threshold = chi2_threshold(cfg.dof.unwrap_or(n), cfg.alpha)?;
    let projection = kalman::project_to_obs(prior, model, &model.r_diag())?;
    let nis = projection.normalized_innovation_sq(&(y - &projection.predicted_obs));
    let mut diag = StepDiagnostics::nominal(n);
    diag.nu_sq = vec![nis; n];
    if nis > threshold {
        diag.rejected = true;
        return Ok((prior.clone(), diag));
    }
    let (post, _) = kalman::update_with_projection(prior, y, model, projection)?;
    Ok((post, diag))
}
