//! Linear-Gaussian state-space model with additive observation outliers.
//!
//! ```text
//! x_t = F x_{t-1} + e_t,        e_t ~ N(0, Q)
//! y_t = H x_t + z_t + u_t,      z_t ~ N(0, R)
//! ```
//!
//! `u_t` is zero for nominal samples and a Rayleigh-magnitude spike for the
//! samples selected by a per-entry Bernoulli draw.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-9;

/// Time-invariant system matrices `F`, `H`, `Q`, `R`.
///
/// `R` must be diagonal: the outlier variance is estimated independently per
/// observation component.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    f: DMatrix<f64>,
    h: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl SystemModel {
    /// Validates shapes, symmetry and semidefiniteness.
    ///
    /// `R` may carry zero diagonal entries (noise-free simulation); the filters
    /// check for strictly positive observation noise where they need it.
    pub fn new(f: DMatrix<f64>, h: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let m = f.nrows();
        if m == 0 || f.ncols() != m {
            return Err(Error::dims("F", "square m×m, m ≥ 1", shape(&f)));
        }
        let n = h.nrows();
        if n == 0 || h.ncols() != m {
            return Err(Error::dims("H", format!("n×{m}, n ≥ 1"), shape(&h)));
        }
        if q.shape() != (m, m) {
            return Err(Error::dims("Q", format!("{m}×{m}"), shape(&q)));
        }
        if r.shape() != (n, n) {
            return Err(Error::dims("R", format!("{n}×{n}"), shape(&r)));
        }
        for (name, mat) in [("F", &f), ("H", &h), ("Q", &q), ("R", &r)] {
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(Error::param(name, "entries must be finite"));
            }
        }
        if !is_symmetric(&q) {
            return Err(Error::param("Q", "must be symmetric"));
        }
        let q_scale = q.diagonal().abs().max().max(1.0);
        if q.clone().symmetric_eigenvalues().min() < -1e-9 * q_scale {
            return Err(Error::param("Q", "must be positive semidefinite"));
        }
        for i in 0..n {
            for j in 0..n {
                if i != j && r[(i, j)] != 0.0 {
                    return Err(Error::param("R", "must be diagonal"));
                }
            }
            if r[(i, i)] < 0.0 {
                return Err(Error::param("R", "diagonal entries must be nonnegative"));
            }
        }
        Ok(Self { f, h, q, r })
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Per-component observation-noise variances `r_k²`.
    pub fn r_diag(&self) -> DVector<f64> {
        self.r.diagonal()
    }

    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    /// Errors unless every `r_k²` is strictly positive.
    pub fn require_positive_obs_noise(&self) -> Result<()> {
        if self.r.diagonal().iter().all(|&v| v > 0.0) {
            Ok(())
        } else {
            Err(Error::param("R", "diagonal entries must be strictly positive"))
        }
    }
}

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}×{}", m.nrows(), m.ncols())
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.abs().max().max(1.0);
    (m - m.transpose()).abs().max() <= SYMMETRY_TOL * scale
}

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be positive and finite, got {value}")))
    }
}

fn constant_velocity(dt: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0])
}

/// Position/velocity model observing both states: `H = I₂`, `Q = q·I₂`, `R = r·I₂`.
///
/// `Q` is the scaled identity used in the reference experiments, not the
/// discretized white-noise-acceleration covariance.
pub fn build_wna_model(q_var: f64, r_var: f64, dt: f64) -> Result<SystemModel> {
    check_positive("q_var", q_var)?;
    check_positive("r_var", r_var)?;
    check_positive("dt", dt)?;
    SystemModel::new(
        constant_velocity(dt),
        DMatrix::identity(2, 2),
        DMatrix::identity(2, 2) * q_var,
        DMatrix::identity(2, 2) * r_var,
    )
}

/// Position/velocity model observing position only: `H = [1 0]`, `R = [r]`.
pub fn build_position_only_model(q_var: f64, r_var: f64, dt: f64) -> Result<SystemModel> {
    check_positive("q_var", q_var)?;
    check_positive("r_var", r_var)?;
    check_positive("dt", dt)?;
    SystemModel::new(
        constant_velocity(dt),
        DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        DMatrix::identity(2, 2) * q_var,
        DMatrix::from_element(1, 1, r_var),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SignMode {
    /// Random ± with equal probability.
    #[default]
    Symmetric,
    Positive,
}

impl std::str::FromStr for SignMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "symmetric" => Ok(SignMode::Symmetric),
            "positive" => Ok(SignMode::Positive),
            other => Err(format!("unknown sign mode `{other}` (symmetric|positive)")),
        }
    }
}

/// Bernoulli-Rayleigh outlier generator.
///
/// `rayleigh_scale` is σ in the density `(x/σ²)·exp(−x²/2σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub probability: f64,
    pub rayleigh_scale: f64,
    pub sign_mode: SignMode,
    pub seed: u64,
}

impl OutlierSpec {
    pub fn new(probability: f64, rayleigh_scale: f64, sign_mode: SignMode, seed: u64) -> Result<Self> {
        let spec = Self {
            probability,
            rayleigh_scale,
            sign_mode,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::param(
                "p",
                format!("outlier probability must lie in [0, 1], got {}", self.probability),
            ));
        }
        check_positive("scale", self.rayleigh_scale)
    }

    /// Mean of the Rayleigh magnitude, `σ·√(π/2)`.
    pub fn rayleigh_mean(&self) -> f64 {
        self.rayleigh_scale * (std::f64::consts::PI / 2.0).sqrt()
    }
}

/// Observations with optional ground truth and injected-outlier mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    pub times: Vec<f64>,
    pub observations: Vec<DVector<f64>>,
    pub truth_states: Option<Vec<DVector<f64>>>,
    pub outlier_mask: Option<Vec<Vec<bool>>>,
}

impl ObservationSeries {
    pub fn new(
        times: Vec<f64>,
        observations: Vec<DVector<f64>>,
        truth_states: Option<Vec<DVector<f64>>>,
        outlier_mask: Option<Vec<Vec<bool>>>,
    ) -> Result<Self> {
        let len = times.len();
        if observations.len() != len {
            return Err(Error::dims("observations", len, observations.len()));
        }
        if let Some(obs) = observations.first() {
            let n = obs.len();
            if observations.iter().any(|y| y.len() != n) {
                return Err(Error::dims("observation width", n, "ragged rows"));
            }
            if let Some(mask) = &outlier_mask {
                if mask.len() != len || mask.iter().any(|row| row.len() != n) {
                    return Err(Error::dims("outlier mask", format!("{len}×{n}"), "other shape"));
                }
            }
        }
        if let Some(truth) = &truth_states {
            if truth.len() != len {
                return Err(Error::dims("truth states", len, truth.len()));
            }
            if let Some(first) = truth.first() {
                if truth.iter().any(|x| x.len() != first.len()) {
                    return Err(Error::dims("truth width", first.len(), "ragged rows"));
                }
            }
        }
        Ok(Self {
            times,
            observations,
            truth_states,
            outlier_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn obs_dim(&self) -> Option<usize> {
        self.observations.first().map(|y| y.len())
    }

    pub fn state_dim(&self) -> Option<usize> {
        self.truth_states.as_ref()?.first().map(|x| x.len())
    }

    /// Number of entries flagged in the outlier mask.
    pub fn outlier_count(&self) -> usize {
        self.outlier_mask
            .as_ref()
            .map(|mask| mask.iter().flatten().filter(|&&b| b).count())
            .unwrap_or(0)
    }

    /// Extracts observation component `k` as a scalar series.
    ///
    /// Truth is split per direction: with `m = 2n` truth columns, direction `k`
    /// gets `[gt_{2k}, gt_{2k+1}]` (position, velocity); with `m = n` it gets
    /// the single position column.
    pub fn direction(&self, k: usize) -> Result<ObservationSeries> {
        let n = self.obs_dim().unwrap_or(0);
        if k >= n {
            return Err(Error::dims("direction index", format!("< {n}"), k));
        }
        let observations = self
            .observations
            .iter()
            .map(|y| DVector::from_element(1, y[k]))
            .collect();
        let truth_states = match (&self.truth_states, self.state_dim()) {
            (Some(truth), Some(m)) if m == 2 * n => Some(
                truth
                    .iter()
                    .map(|x| DVector::from_column_slice(&[x[2 * k], x[2 * k + 1]]))
                    .collect(),
            ),
            (Some(truth), Some(m)) if m == n => Some(
                truth
                    .iter()
                    .map(|x| DVector::from_element(1, x[k]))
                    .collect(),
            ),
            (Some(_), Some(m)) => {
                return Err(Error::dims("truth width for per-direction split", format!("{n} or {}", 2 * n), m))
            }
            _ => None,
        };
        let outlier_mask = self
            .outlier_mask
            .as_ref()
            .map(|mask| mask.iter().map(|row| vec![row[k]]).collect());
        ObservationSeries::new(self.times.clone(), observations, truth_states, outlier_mask)
    }
}

/// Matrix `L` with `L·Lᵀ = cov` for a symmetric PSD `cov` (eigen square root,
/// so singular covariances are fine).
fn psd_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = cov.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draws a trajectory of `horizon` steps starting from `x0`.
///
/// The first state is `F·x0 + e_1`; observations carry Gaussian noise only.
/// Timestamps are `dt, 2·dt, …`; `dt` only labels the samples, the dynamics
/// come from `F`.
pub fn simulate_trajectory(
    model: &SystemModel,
    x0: &DVector<f64>,
    horizon: usize,
    dt: f64,
    seed: u64,
) -> Result<ObservationSeries> {
    let m = model.state_dim();
    let n = model.obs_dim();
    if x0.len() != m {
        return Err(Error::dims("x0", m, x0.len()));
    }
    if horizon == 0 {
        return Err(Error::param("horizon", "must be at least 1"));
    }
    check_positive("dt", dt)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q_sqrt = psd_sqrt(model.q());
    let r_std = model.r_diag().map(|v| v.sqrt());

    let mut times = Vec::with_capacity(horizon);
    let mut truth = Vec::with_capacity(horizon);
    let mut observations = Vec::with_capacity(horizon);
    let mut x = x0.clone();
    for step in 0..horizon {
        let e = &q_sqrt * standard_normal_vec(&mut rng, m);
        x = model.f() * &x + e;
        let z = standard_normal_vec(&mut rng, n).component_mul(&r_std);
        observations.push(model.h() * &x + z);
        truth.push(x.clone());
        times.push((step + 1) as f64 * dt);
    }
    ObservationSeries::new(times, observations, Some(truth), None)
}

/// Adds Bernoulli-selected Rayleigh spikes independently to every observation entry.
pub fn inject_outliers(series: &ObservationSeries, spec: &OutlierSpec) -> Result<ObservationSeries> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut observations = series.observations.clone();
    let mut mask = Vec::with_capacity(series.len());
    for y in observations.iter_mut() {
        let mut row = vec![false; y.len()];
        for (k, hit) in row.iter_mut().enumerate() {
            if rng.gen_bool(spec.probability) {
                let magnitude = rayleigh_sample(&mut rng, spec.rayleigh_scale);
                let sign = match spec.sign_mode {
                    SignMode::Symmetric if rng.gen_bool(0.5) => -1.0,
                    _ => 1.0,
                };
                y[k] += sign * magnitude;
                *hit = true;
            }
        }
        mask.push(row);
    }
    ObservationSeries::new(
        series.times.clone(),
        observations,
        series.truth_states.clone(),
        Some(mask),
    )
}

/// Inverse-CDF draw: `σ·√(−2 ln U)`, `U ∈ (0, 1)`.
fn rayleigh_sample(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let u: f64 = rng.sample(Open01);
    scale * (-2.0 * u.ln()).sqrt()
}
