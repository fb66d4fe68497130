//! Standard linear Kalman filter: predict, observation projection and update.
//!
//! Observation-noise covariances are passed as their diagonal so the same
//! update serves the plain filter (`R`) and the outlier-insensitive iterations
//! (inflated `Γ = diag(r² + γ²)`).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssmodel::SystemModel;

/// Condition bound on the scaled innovation covariance.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

/// Default diffuse prior variance.
pub const DIFFUSE_VARIANCE: f64 = 1e3;

/// Mean and covariance of a Gaussian state belief (prior or posterior).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let m = mean.len();
        if cov.shape() != (m, m) {
            return Err(Error::dims("belief covariance", format!("{m}×{m}"), format!("{}×{}", cov.nrows(), cov.ncols())));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Default initial belief: `mean = H⁺·y` (least-squares back-projection of
    /// the first observation, zero on unobserved directions) and
    /// `cov = variance·I`.
    pub fn diffuse_from_observation(y: &DVector<f64>, model: &SystemModel, variance: f64) -> Result<Self> {
        if y.len() != model.obs_dim() {
            return Err(Error::dims("observation", model.obs_dim(), y.len()));
        }
        let pinv = model
            .h()
            .clone()
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::param("H", e.to_string()))?;
        let m = model.state_dim();
        Ok(Self {
            mean: pinv * y,
            cov: DMatrix::identity(m, m) * variance,
        })
    }

    /// Smallest eigenvalue is at least `−1e-9·max(1, trace)`.
    pub fn is_psd(&self) -> bool {
        let tol = 1e-9 * self.cov.trace().abs().max(1.0);
        self.cov.iter().all(|v| v.is_finite())
            && self.cov.clone().symmetric_eigenvalues().iter().all(|&l| l >= -tol)
    }

    pub fn is_symmetric(&self) -> bool {
        self.cov == self.cov.transpose()
    }
}

/// Quantities computed by an update, kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateArtifacts {
    pub predicted_obs: DVector<f64>,
    pub innovation: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    pub gain: DMatrix<f64>,
}

/// Predicted observation and innovation covariance with a factorization of
/// the latter ready for solves.
#[derive(Debug, Clone)]
pub struct Projection {
    pub predicted_obs: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    // S = D^{1/2} C D^{1/2}, C = chol·cholᵀ
    inv_sqrt_diag: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Projection {
    /// `S⁻¹·B`.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let scaled = DMatrix::from_diagonal(&self.inv_sqrt_diag) * rhs;
        DMatrix::from_diagonal(&self.inv_sqrt_diag) * self.chol.solve(&scaled)
    }

    /// Normalized innovation squared `Δyᵀ·S⁻¹·Δy`.
    pub fn normalized_innovation_sq(&self, innovation: &DVector<f64>) -> f64 {
        let scaled = innovation.component_mul(&self.inv_sqrt_diag);
        scaled.dot(&self.chol.solve(&scaled))
    }

    /// `log N(y; ŷ, S)`.
    pub fn log_likelihood(&self, y: &DVector<f64>) -> f64 {
        let innovation = y - &self.predicted_obs;
        let n = innovation.len() as f64;
        let log_det_c: f64 = self.chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_det_d: f64 = self.inv_sqrt_diag.iter().map(|d| -2.0 * d.ln()).sum();
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det_c + log_det_d + self.normalized_innovation_sq(&innovation))
    }
}

fn check_belief(belief: &GaussianBelief, model: &SystemModel) -> Result<()> {
    let m = model.state_dim();
    if belief.mean.len() != m {
        return Err(Error::dims("belief mean", m, belief.mean.len()));
    }
    if belief.cov.shape() != (m, m) {
        return Err(Error::dims("belief covariance", format!("{m}×{m}"), format!("{}×{}", belief.cov.nrows(), belief.cov.ncols())));
    }
    Ok(())
}

pub(crate) fn symmetrize(mat: &mut DMatrix<f64>) {
    let n = mat.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (mat[(i, j)] + mat[(j, i)]);
            mat[(i, j)] = avg;
            mat[(j, i)] = avg;
        }
    }
}

/// `x⁻ = F·x`, `Σ⁻ = F·Σ·Fᵀ + Q`.
pub fn predict(belief: &GaussianBelief, model: &SystemModel) -> Result<GaussianBelief> {
    check_belief(belief, model)?;
    let f = model.f();
    let mut cov = f * &belief.cov * f.transpose() + model.q();
    symmetrize(&mut cov);
    Ok(GaussianBelief {
        mean: f * &belief.mean,
        cov,
    })
}

/// `ŷ = H·x⁻`, `S = H·Σ⁻·Hᵀ + diag(obs_var)`.
///
/// Fails when `S` has a non-positive diagonal entry or when its
/// diagonally-scaled form is not positive definite with condition below
/// [`MAX_INNOVATION_CONDITION`].
pub fn project_to_obs(prior: &GaussianBelief, model: &SystemModel, obs_var: &DVector<f64>) -> Result<Projection> {
    check_belief(prior, model)?;
    let n = model.obs_dim();
    if obs_var.len() != n {
        return Err(Error::dims("observation noise diagonal", n, obs_var.len()));
    }
    if obs_var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::param("obs_cov", "diagonal must be finite and nonnegative"));
    }
    let h = model.h();
    let mut s = h * &prior.cov * h.transpose();
    for k in 0..n {
        s[(k, k)] += obs_var[k];
    }
    symmetrize(&mut s);

    let diag = s.diagonal();
    if let Some(k) = diag.iter().position(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::SingularInnovation(format!("S[{k},{k}] = {}", diag[k])));
    }
    let inv_sqrt_diag = diag.map(|d| 1.0 / d.sqrt());
    let scale = DMatrix::from_diagonal(&inv_sqrt_diag);
    let mut corr = &scale * &s * &scale;
    symmetrize(&mut corr);
    if n > 1 {
        let eig = corr.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if lo <= 0.0 || hi / lo > MAX_INNOVATION_CONDITION {
            return Err(Error::SingularInnovation(format!("scaled eigenvalues in [{lo:e}, {hi:e}]")));
        }
    }
    let chol = Cholesky::new(corr).ok_or_else(|| Error::SingularInnovation("Cholesky factorization failed".into()))?;
    Ok(Projection {
        predicted_obs: h * &prior.mean,
        innovation_cov: s,
        inv_sqrt_diag,
        chol,
    })
}

/// Kalman update with observation-noise diagonal `obs_var`:
/// `K = Σ⁻Hᵀ S⁻¹`, `x = x⁻ + K·Δy`, `Σ = Σ⁻ − K·S·Kᵀ` (symmetrized).
pub fn update(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &SystemModel,
    obs_var: &DVector<f64>,
) -> Result<(GaussianBelief, UpdateArtifacts)> {
    let projection = project_to_obs(prior, model, obs_var)?;
    update_with_projection(prior, y, model, projection)
}

pub(crate) fn update_with_projection(
    prior: &GaussianBelief,
    y: &DVector<f64>,
    model: &SystemModel,
    projection: Projection,
) -> Result<(GaussianBelief, UpdateArtifacts)> {
    if y.len() != model.obs_dim() {
        return Err(Error::dims("observation", model.obs_dim(), y.len()));
    }
    let h_sigma = model.h() * &prior.cov;
    // S·Kᵀ = H·Σ
    let gain = projection.solve(&h_sigma).transpose();
    let innovation = y - &projection.predicted_obs;
    let mean = &prior.mean + &gain * &innovation;
    let mut cov = &prior.cov - &gain * &projection.innovation_cov * gain.transpose();
    symmetrize(&mut cov);
    Ok((
        GaussianBelief { mean, cov },
        UpdateArtifacts {
            predicted_obs: projection.predicted_obs,
            innovation,
            innovation_cov: projection.innovation_cov,
            gain,
        },
    ))
}
