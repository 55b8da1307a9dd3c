//! Importance weights for the IS, IIS and AIS exposure updates, partial-posterior
//! moment estimation, and weight-degeneracy diagnostics.
//!
//! Everything is kept in log space; the joint IS weight over `n = 200` Gaussian
//! densities underflows long before it can be normalized directly.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{cholesky, JitterPolicy};
use crate::model::{PartialPosteriorDraws, RegressionState, TwoStageDataset};

/// Shrinkage levels tried by [`Shrinkage::Auto`], smallest first.
pub const SHRINK_LADDER: [f64; 7] = [0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0];

/// Largest acceptable condition number of the regularized covariance.
pub const MAX_CONDITION: f64 = 1e12;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// How much to shrink the sample covariance toward its diagonal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shrinkage {
    Fixed(f64),
    #[default]
    Auto,
}

/// Where AIS takes the partial posterior mean and covariance from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentSource {
    /// Sample mean and covariance of the draws.
    #[default]
    Sample,
    /// The analytic stage-one partial posterior, when the stage-one model is known.
    Known,
}

/// Gaussian moments of the partial posterior used by the AIS density ratio.
#[derive(Clone, Debug)]
pub struct MomentEstimate {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    diag: DVector<f64>,
    precision_full: DMatrix<f64>,
    /// `Σ_reg⁻¹ − diag(D̂)⁻¹`, precomputed once.
    adjustment: DMatrix<f64>,
    log_det_ratio: f64,
    shrink_gamma: f64,
}

impl MomentEstimate {
    pub fn estimate(draws: &PartialPosteriorDraws, shrinkage: Shrinkage) -> Result<Self> {
        let s = draws.n_draws();
        if s < 2 {
            return Err(Error::TooFewDraws(format!("moment estimation needs S >= 2, got {s}")));
        }
        let mean = draws.column_means();
        let mut centered = draws.matrix().clone();
        for (i, mut col) in centered.column_iter_mut().enumerate() {
            col.add_scalar_mut(-mean[i]);
        }
        let cov = centered.tr_mul(&centered) / (s as f64 - 1.0);
        Self::from_moments(mean, cov, shrinkage)
    }

    /// Use a given mean and covariance instead of estimating them from draws.
    pub fn from_moments(mean: DVector<f64>, cov: DMatrix<f64>, shrinkage: Shrinkage) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(dim_mismatch("moment covariance", n, cov.nrows()));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("moments".into()));
        }
        let diag = cov.diagonal();
        if let Some(i) = diag.iter().position(|&d| !(d > 0.0)) {
            return Err(Error::ZeroVariance(i));
        }

        let ladder: Vec<f64> = match shrinkage {
            Shrinkage::Fixed(g) => {
                if !(0.0..=1.0).contains(&g) {
                    return Err(Error::InvalidParameter(format!(
                        "shrinkage must lie in [0, 1], got {g}"
                    )));
                }
                vec![g]
            }
            Shrinkage::Auto => SHRINK_LADDER.to_vec(),
        };

        let diag_inv = diag.map(|d| 1.0 / d);
        let log_det_diag: f64 = diag.iter().map(|d| d.ln()).sum();
        let mut last_err = None;
        for &gamma in &ladder {
            if gamma == 1.0 {
                return Ok(MomentEstimate {
                    precision_full: DMatrix::from_diagonal(&diag_inv),
                    adjustment: DMatrix::zeros(n, n),
                    mean,
                    cov: DMatrix::from_diagonal(&diag),
                    diag,
                    log_det_ratio: 0.0,
                    shrink_gamma: 1.0,
                });
            }
            let mut reg = &cov * (1.0 - gamma);
            for i in 0..n {
                reg[(i, i)] = diag[i];
            }
            let chol = match cholesky(&reg, JitterPolicy::Exact) {
                Ok(c) => c,
                Err(e) => {
                    last_err = Some(e);
                    continue;
                }
            };
            let eig = SymmetricEigen::new(reg.clone()).eigenvalues;
            let (lo, hi) = (eig.min(), eig.max());
            if !(lo > 0.0) || hi / lo >= MAX_CONDITION {
                last_err = Some(Error::NotPositiveDefinite(format!(
                    ": condition estimate {:e} at shrinkage {gamma}",
                    hi / lo
                )));
                continue;
            }
            let precision_full = chol.inverse();
            let mut adjustment = precision_full.clone();
            for i in 0..n {
                adjustment[(i, i)] -= diag_inv[i];
            }
            return Ok(MomentEstimate {
                log_det_ratio: 0.5 * (log_det_diag - chol.log_det()),
                precision_full,
                adjustment,
                mean,
                cov: reg,
                diag,
                shrink_gamma: gamma,
            });
        }
        Err(last_err.unwrap_or_else(|| Error::NotPositiveDefinite(": moment covariance".into())))
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Regularized covariance `(1 − γ) Σ̂ + γ diag(Σ̂)`.
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn precision_full(&self) -> &DMatrix<f64> {
        &self.precision_full
    }

    pub fn adjustment(&self) -> &DMatrix<f64> {
        &self.adjustment
    }

    /// `½ [log det D̂ − log det Σ_reg]`.
    pub fn log_det_ratio(&self) -> f64 {
        self.log_det_ratio
    }

    pub fn shrink_gamma(&self) -> f64 {
        self.shrink_gamma
    }

    pub fn n_units(&self) -> usize {
        self.mean.len()
    }
}

/// Unit-level Gaussian log-likelihood of `y` at mean `offset + θ ζ` for every draw of one unit.
#[inline]
pub(crate) fn unit_log_likelihoods(
    unit_draws: &[f64],
    y: f64,
    offset: f64,
    theta: f64,
    sigma_sq: f64,
    out: &mut [f64],
) {
    let norm = -HALF_LN_2PI - 0.5 * sigma_sq.ln();
    let inv = 0.5 / sigma_sq;
    let target = y - offset;
    for (o, &z) in out.iter_mut().zip(unit_draws) {
        let r = target - theta * z;
        *o = norm - r * r * inv;
    }
}

fn check_inputs(draws: &PartialPosteriorDraws, data: &TwoStageDataset, state: &RegressionState) -> Result<()> {
    if draws.n_units() != data.n() {
        return Err(dim_mismatch("draw columns vs outcomes", data.n(), draws.n_units()));
    }
    if state.beta.len() != data.p() {
        return Err(dim_mismatch("coefficient length", data.p(), state.beta.len()));
    }
    if !(state.sigma_eps_sq > 0.0) || !state.theta_zeta.is_finite() || !state.beta0.is_finite() {
        return Err(Error::NonFinite("stage-two parameters".into()));
    }
    Ok(())
}

/// Per-unit log-weights: entry `(s, i)` is `log N(yᵢ | β0 + θζ ζᵢˢ + xᵢᵀβ, σ²ε)`.
pub fn iis_log_weights(
    draws: &PartialPosteriorDraws,
    data: &TwoStageDataset,
    state: &RegressionState,
) -> Result<DMatrix<f64>> {
    check_inputs(draws, data, state)?;
    let (s, n) = (draws.n_draws(), draws.n_units());
    let offsets = state.offsets(data.covariates());
    let mut out = DMatrix::zeros(s, n);
    for i in 0..n {
        let col = &mut out.as_mut_slice()[i * s..(i + 1) * s];
        unit_log_likelihoods(
            draws.unit(i),
            data.y_obs()[i],
            offsets[i],
            state.theta_zeta,
            state.sigma_eps_sq,
            col,
        );
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("log-weights".into()));
    }
    Ok(out)
}

/// Joint log-weights: entry `s` is the stage-two log-likelihood of all units at draw `s`.
pub fn is_log_weights(
    draws: &PartialPosteriorDraws,
    data: &TwoStageDataset,
    state: &RegressionState,
) -> Result<DVector<f64>> {
    check_inputs(draws, data, state)?;
    let offsets = state.offsets(data.covariates());
    let y = data.y_obs();
    let norm = -HALF_LN_2PI - 0.5 * state.sigma_eps_sq.ln();
    let m = draws.matrix();
    let out = DVector::from_fn(draws.n_draws(), |s, _| {
        let mut acc = 0.0;
        for i in 0..draws.n_units() {
            let r = y[i] - offsets[i] - state.theta_zeta * m[(s, i)];
            acc += norm - 0.5 * r * r / state.sigma_eps_sq;
        }
        acc
    });
    if out.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("log-weights".into()));
    }
    Ok(out)
}

/// Log AIS weights for `R × n` proposals: `log_det_ratio − ½ δᵀ(Σ_reg⁻¹ − D̂⁻¹)δ`.
pub fn ais_log_weights(proposals: &DMatrix<f64>, moments: &MomentEstimate) -> Result<DVector<f64>> {
    let (r, n) = proposals.shape();
    if n != moments.n_units() {
        return Err(dim_mismatch("proposal columns", moments.n_units(), n));
    }
    let mut delta = proposals.clone();
    for (i, mut col) in delta.column_iter_mut().enumerate() {
        col.add_scalar_mut(-moments.mean[i]);
    }
    let mut scratch = DMatrix::zeros(r, n);
    let mut out = DVector::zeros(r);
    ais_log_weights_centered(&delta, moments, &mut scratch, &mut out);
    Ok(out)
}

/// [`ais_log_weights`] for proposals already centered at the moment mean, reusing buffers.
pub(crate) fn ais_log_weights_centered(
    delta: &DMatrix<f64>,
    moments: &MomentEstimate,
    scratch: &mut DMatrix<f64>,
    out: &mut DVector<f64>,
) {
    let (r, n) = delta.shape();
    debug_assert_eq!(n, moments.n_units());
    if out.len() != r {
        *out = DVector::zeros(r);
    }
    if moments.shrink_gamma == 1.0 {
        out.fill(0.0);
        return;
    }
    if scratch.shape() != (r, n) {
        *scratch = DMatrix::zeros(r, n);
    }
    scratch.gemm(1.0, delta, &moments.adjustment, 0.0);
    out.fill(moments.log_det_ratio);
    for i in 0..n {
        let d = delta.column(i);
        let q = scratch.column(i);
        for k in 0..r {
            out[k] -= 0.5 * d[k] * q[k];
        }
    }
}

/// Degeneracy summary of a normalized weight vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub ess: f64,
    pub max_weight: f64,
    pub entropy: f64,
}

/// `ESS = 1/Σw²`, maximum weight, and `−Σ w log w`.
pub fn weight_report(weights: &[f64]) -> WeightReport {
    let mut sum_sq = 0.0;
    let mut max_weight: f64 = 0.0;
    let mut entropy = 0.0;
    for &w in weights {
        sum_sq += w * w;
        max_weight = max_weight.max(w);
        if w > 0.0 {
            entropy -= w * w.ln();
        }
    }
    WeightReport {
        ess: 1.0 / sum_sq,
        max_weight,
        entropy,
    }
}
