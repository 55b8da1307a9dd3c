//! Two-stage model types, the Gaussian measurement-error stage one, the
//! stage-two regression Gibbs sweep, and closed-form estimands.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{cholesky, equicorrelation, mvn_sample, mvn_sample_rows, symmetrize, JitterPolicy};
use crate::rng::inverse_gamma_sample;

/// `S × n` matrix of stage-one draws; row `s` is one joint draw over all units.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialPosteriorDraws {
    draws: DMatrix<f64>,
}

impl PartialPosteriorDraws {
    pub fn new(draws: DMatrix<f64>) -> Result<Self> {
        if draws.nrows() < 2 {
            return Err(Error::TooFewDraws(format!(
                "need at least 2 partial posterior draws, got {}",
                draws.nrows()
            )));
        }
        if draws.ncols() == 0 {
            return Err(Error::InvalidParameter("draws have zero units".into()));
        }
        if let Some(pos) = draws.iter().position(|v| !v.is_finite()) {
            let (s, i) = (pos % draws.nrows(), pos / draws.nrows());
            return Err(Error::NonFinite(format!("draw {s}, unit {i}")));
        }
        Ok(PartialPosteriorDraws { draws })
    }

    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub fn n_units(&self) -> usize {
        self.draws.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.draws
    }

    pub fn row(&self, s: usize) -> DVector<f64> {
        self.draws.row(s).transpose()
    }

    /// Draws for unit `i` across all `S` draws (contiguous in memory).
    pub fn unit(&self, i: usize) -> &[f64] {
        let s = self.draws.nrows();
        &self.draws.as_slice()[i * s..(i + 1) * s]
    }

    pub fn column_means(&self) -> DVector<f64> {
        self.draws.row_mean().transpose()
    }
}

/// Design of the Gaussian measurement-error stage one `z = ζ + u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOneConfig {
    pub n: usize,
    pub sigma_u_sq: f64,
    pub sigma_zeta_sq: f64,
    pub rho_u: f64,
    pub rho_zeta: f64,
}

impl StageOneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("stage one needs n >= 1".into()));
        }
        if !(self.sigma_u_sq >= 0.0) || !(self.sigma_zeta_sq > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "variances must satisfy sigma_u_sq >= 0 and sigma_zeta_sq > 0, got ({}, {})",
                self.sigma_u_sq, self.sigma_zeta_sq
            )));
        }
        for rho in [self.rho_u, self.rho_zeta] {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::InvalidParameter(format!("correlation {rho} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn error_cov(&self) -> DMatrix<f64> {
        equicorrelation(self.n, self.sigma_u_sq, self.rho_u)
    }

    pub fn prior_cov(&self) -> DMatrix<f64> {
        equicorrelation(self.n, self.sigma_zeta_sq, self.rho_zeta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOneTruth {
    pub zeta: DVector<f64>,
    pub u: DVector<f64>,
    pub z: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOneSimulation {
    pub config: StageOneConfig,
    pub truth: Option<StageOneTruth>,
}

/// Draw `ζ ~ MVN(0, Σζ)`, `u ~ MVN(0, Σu)` and set `z = ζ + u`.
pub fn simulate_stage_one<R: Rng + ?Sized>(
    config: &StageOneConfig,
    rng: &mut R,
) -> Result<StageOneSimulation> {
    config.validate()?;
    let n = config.n;
    let zeta_chol = cholesky(&config.prior_cov(), JitterPolicy::Exact)?;
    let zeta = mvn_sample(&DVector::zeros(n), &zeta_chol, rng)?;
    let u = if config.sigma_u_sq == 0.0 {
        DVector::zeros(n)
    } else {
        let u_chol = cholesky(&config.error_cov(), JitterPolicy::Exact)?;
        mvn_sample(&DVector::zeros(n), &u_chol, rng)?
    };
    let z = &zeta + &u;
    Ok(StageOneSimulation {
        config: config.clone(),
        truth: Some(StageOneTruth { zeta, u, z }),
    })
}

/// Mean and covariance of `[ζ | z]` when `z = ζ + u` with Gaussian prior and error.
///
/// Uses the product form `Σζ (Σu + Σζ)⁻¹ Σu`, which equals `(Σu⁻¹ + Σζ⁻¹)⁻¹`,
/// and mean `Σζ (Σu + Σζ)⁻¹ z`.
pub fn analytic_partial_posterior(
    z: &DVector<f64>,
    sigma_u: &DMatrix<f64>,
    sigma_zeta: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = z.len();
    if sigma_u.nrows() != n || sigma_u.ncols() != n {
        return Err(dim_mismatch("error covariance size", n, sigma_u.nrows()));
    }
    if sigma_zeta.nrows() != n || sigma_zeta.ncols() != n {
        return Err(dim_mismatch("prior covariance size", n, sigma_zeta.nrows()));
    }
    cholesky(sigma_u, JitterPolicy::Exact)
        .map_err(|_| Error::NotPositiveDefinite(": measurement error covariance".into()))?;
    cholesky(sigma_zeta, JitterPolicy::Exact)
        .map_err(|_| Error::NotPositiveDefinite(": exposure prior covariance".into()))?;
    let total = cholesky(&(sigma_u + sigma_zeta), JitterPolicy::Exact)?;
    let mean = sigma_zeta * total.solve(z);
    let cov = symmetrize(sigma_zeta * total.solve_matrix(sigma_u));
    Ok((mean, cov))
}

/// `S` independent draws from MVN(mean, cov).
pub fn sample_partial_posterior_draws<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    s: usize,
    rng: &mut R,
) -> Result<PartialPosteriorDraws> {
    if s < 2 {
        return Err(Error::TooFewDraws(format!("need S >= 2, got {s}")));
    }
    let chol = cholesky(cov, JitterPolicy::Exact)?;
    PartialPosteriorDraws::new(mvn_sample_rows(mean, &chol, s, rng)?)
}

/// Ground-truth stage-two parameters for simulated data.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionTruth {
    pub beta0: f64,
    pub theta_zeta: f64,
    pub beta: Vec<f64>,
    pub sigma_eps_sq: f64,
    pub zeta: Option<DVector<f64>>,
}

/// Outcomes, known covariates, and the outcome scale used by the regression.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageDataset {
    y: DVector<f64>,
    y_obs: DVector<f64>,
    covariates: DMatrix<f64>,
    log_outcome: bool,
    pub truth: Option<RegressionTruth>,
}

impl TwoStageDataset {
    /// `covariates` is `n × p`; pass an `n × 0` matrix when there are none.
    pub fn new(y: DVector<f64>, covariates: DMatrix<f64>, log_outcome: bool) -> Result<Self> {
        if covariates.nrows() != y.len() {
            return Err(dim_mismatch("covariate rows", y.len(), covariates.nrows()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("outcomes".into()));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariates".into()));
        }
        let y_obs = if log_outcome {
            if let Some(i) = y.iter().position(|&v| v <= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "log outcome requires y > 0, row {i} is {}",
                    y[i]
                )));
            }
            y.map(f64::ln)
        } else {
            y.clone()
        };
        Ok(TwoStageDataset {
            y,
            y_obs,
            covariates,
            log_outcome,
            truth: None,
        })
    }

    /// Build a log-outcome dataset from `log y` directly, keeping it bit-exact.
    pub fn from_log_outcome(log_y: DVector<f64>, covariates: DMatrix<f64>) -> Result<Self> {
        if covariates.nrows() != log_y.len() {
            return Err(dim_mismatch("covariate rows", log_y.len(), covariates.nrows()));
        }
        if log_y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log outcomes".into()));
        }
        Ok(TwoStageDataset {
            y: log_y.map(f64::exp),
            y_obs: log_y,
            covariates,
            log_outcome: true,
            truth: None,
        })
    }

    pub fn with_truth(mut self, truth: RegressionTruth) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    /// Outcomes on the raw scale.
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Outcomes on the regression scale (`log y` when `log_outcome`).
    pub fn y_obs(&self) -> &DVector<f64> {
        &self.y_obs
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn log_outcome(&self) -> bool {
        self.log_outcome
    }
}

/// Prior scale for the coefficient block `(β0, θζ, β)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CoefScale {
    Fixed { sd: f64 },
    /// `σθ ~ U(0, upper)`, updated by slice sampling.
    Learned { upper: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub ig_shape: f64,
    pub ig_rate: f64,
    pub coef_scale: CoefScale,
}

impl PriorConfig {
    /// `σ²ε ~ IG(3, 6)`, `σθ = 1000`.
    pub fn simulation_default() -> Self {
        PriorConfig {
            ig_shape: 3.0,
            ig_rate: 6.0,
            coef_scale: CoefScale::Fixed { sd: 1000.0 },
        }
    }

    /// `σ²ε ~ IG(0.01, 0.01)`, `σθ ~ U(0, 1000)`.
    pub fn ridge_learned() -> Self {
        PriorConfig {
            ig_shape: 0.01,
            ig_rate: 0.01,
            coef_scale: CoefScale::Learned { upper: 1000.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ig_shape > 0.0) || !(self.ig_rate > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "IG prior needs a > 0 and b > 0, got ({}, {})",
                self.ig_shape, self.ig_rate
            )));
        }
        match self.coef_scale {
            CoefScale::Fixed { sd } if !(sd > 0.0) => Err(Error::InvalidParameter(format!(
                "coefficient prior sd must be positive, got {sd}"
            ))),
            CoefScale::Learned { upper } if !(upper > 0.0 && upper.is_finite()) => Err(
                Error::InvalidParameter(format!("uniform bound must be positive, got {upper}")),
            ),
            _ => Ok(()),
        }
    }

    fn initial_sigma_theta(&self) -> f64 {
        match self.coef_scale {
            CoefScale::Fixed { sd } => sd,
            CoefScale::Learned { upper } => upper.min(1.0),
        }
    }
}

/// Current values of the stage-two parameters and the exposure vector.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionState {
    pub beta0: f64,
    pub theta_zeta: f64,
    pub beta: DVector<f64>,
    pub sigma_eps_sq: f64,
    pub sigma_theta: f64,
    pub zeta: DVector<f64>,
}

impl RegressionState {
    /// Neutral start: zero coefficients, unit error variance.
    pub fn initial(p: usize, prior: &PriorConfig, zeta: DVector<f64>) -> Self {
        RegressionState {
            beta0: 0.0,
            theta_zeta: 0.0,
            beta: DVector::zeros(p),
            sigma_eps_sq: 1.0,
            sigma_theta: prior.initial_sigma_theta(),
            zeta,
        }
    }

    /// `β0 + xᵢᵀβ` for every unit.
    pub fn offsets(&self, covariates: &DMatrix<f64>) -> DVector<f64> {
        let mut eta = covariates * &self.beta;
        eta.add_scalar_mut(self.beta0);
        eta
    }

    /// Coefficient block in sweep order `(β0, θζ, β)`.
    pub fn coefficients(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.beta.len() + 2);
        c[0] = self.beta0;
        c[1] = self.theta_zeta;
        c.rows_mut(2, self.beta.len()).copy_from(&self.beta);
        c
    }
}

/// Stage-two design `[1, ζ, X]`.
pub fn design_matrix(zeta: &DVector<f64>, covariates: &DMatrix<f64>) -> DMatrix<f64> {
    let n = zeta.len();
    let p = covariates.ncols();
    let mut w = DMatrix::zeros(n, p + 2);
    w.column_mut(0).fill(1.0);
    w.column_mut(1).copy_from(zeta);
    if p > 0 {
        w.columns_mut(2, p).copy_from(covariates);
    }
    w
}

/// One exact Gibbs sweep of `(β0, θζ, β)`, then `σ²ε`, then `σθ` when learned, given ζ.
pub fn regression_conditional_sweep<R: Rng + ?Sized>(
    data: &TwoStageDataset,
    zeta: &DVector<f64>,
    prior: &PriorConfig,
    state: &RegressionState,
    rng: &mut R,
) -> Result<RegressionState> {
    let n = data.n();
    if zeta.len() != n {
        return Err(dim_mismatch("exposure length", n, zeta.len()));
    }
    if !(state.sigma_eps_sq > 0.0) {
        return Err(Error::InvalidParameter("sigma_eps_sq must be positive".into()));
    }
    let w = design_matrix(zeta, data.covariates());
    let k = w.ncols();
    let y = data.y_obs();

    let ridge = state.sigma_eps_sq / (state.sigma_theta * state.sigma_theta);
    let mut precision = w.tr_mul(&w);
    for j in 0..k {
        precision[(j, j)] += ridge;
    }
    let chol = Cholesky::new(precision)
        .ok_or_else(|| Error::NotPositiveDefinite(": coefficient precision".into()))?;
    let mean = chol.solve(&w.tr_mul(y));
    let eps = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
    let noise = chol
        .l()
        .tr_solve_lower_triangular(&eps)
        .expect("cholesky factor has positive diagonal");
    let coefs = mean + noise * state.sigma_eps_sq.sqrt();

    let resid = y - &w * &coefs;
    let rss = resid.norm_squared();
    if !rss.is_finite() {
        return Err(Error::NonFinite("regression residuals".into()));
    }
    let sigma_eps_sq = inverse_gamma_sample(
        prior.ig_shape + 0.5 * n as f64,
        prior.ig_rate + 0.5 * rss,
        rng,
    )?;

    let sigma_theta = match prior.coef_scale {
        CoefScale::Fixed { sd } => sd,
        CoefScale::Learned { upper } => {
            let ss = coefs.norm_squared();
            let log_f = |s: f64| {
                if s <= 0.0 || s > upper {
                    f64::NEG_INFINITY
                } else {
                    -(k as f64) * s.ln() - ss / (2.0 * s * s)
                }
            };
            slice_sample_doubling(state.sigma_theta, state.sigma_theta, 20, log_f, rng)
        }
    };

    Ok(RegressionState {
        beta0: coefs[0],
        theta_zeta: coefs[1],
        beta: coefs.rows(2, k - 2).into_owned(),
        sigma_eps_sq,
        sigma_theta,
        zeta: zeta.clone(),
    })
}

/// Univariate slice sampler with interval doubling and the matching acceptance test.
pub fn slice_sample_doubling<R, F>(x0: f64, width: f64, max_doublings: usize, log_f: F, rng: &mut R) -> f64
where
    R: Rng + ?Sized,
    F: Fn(f64) -> f64,
{
    let e: f64 = Exp1.sample(rng);
    let log_y = log_f(x0) - e;
    let w = width.max(1e-12);

    let mut left = x0 - w * rng.random::<f64>();
    let mut right = left + w;
    let mut k = max_doublings;
    while k > 0 && (log_y < log_f(left) || log_y < log_f(right)) {
        if rng.random::<f64>() < 0.5 {
            left -= right - left;
        } else {
            right += right - left;
        }
        k -= 1;
    }

    let accept = |x1: f64| {
        let (mut lh, mut rh) = (left, right);
        let mut differ = false;
        while rh - lh > 1.1 * w {
            let mid = 0.5 * (lh + rh);
            if (x0 < mid && x1 >= mid) || (x0 >= mid && x1 < mid) {
                differ = true;
            }
            if x1 < mid {
                rh = mid;
            } else {
                lh = mid;
            }
            if differ && log_y >= log_f(lh) && log_y >= log_f(rh) {
                return false;
            }
        }
        true
    };

    let (mut lo, mut hi) = (left, right);
    loop {
        let x1 = lo + rng.random::<f64>() * (hi - lo);
        if log_y < log_f(x1) && accept(x1) {
            return x1;
        }
        if x1 < x0 {
            lo = x1;
        } else {
            hi = x1;
        }
        if hi - lo < 1e-14 * x0.abs().max(1.0) {
            return x0;
        }
    }
}

/// Closed-form estimands implied by each plug-in strategy under the isotropic model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimands {
    pub lambda: f64,
    pub theta_z: f64,
    pub theta_zeta_hat: f64,
    pub theta_partial: f64,
    pub var_y_given_z: f64,
    pub var_y_given_zeta_hat: f64,
    pub var_y_given_partial: f64,
}

pub fn theoretical_estimands(
    theta_zeta: f64,
    sigma_zeta_sq: f64,
    sigma_u_sq: f64,
    sigma_eps_sq: f64,
) -> Result<Estimands> {
    if !(sigma_zeta_sq > 0.0) || !(sigma_u_sq >= 0.0) || !(sigma_eps_sq > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "variances must be positive, got ({sigma_zeta_sq}, {sigma_u_sq}, {sigma_eps_sq})"
        )));
    }
    let lambda = sigma_zeta_sq / (sigma_zeta_sq + sigma_u_sq);
    let plug_in_inflation = theta_zeta * theta_zeta * lambda * sigma_u_sq;
    Ok(Estimands {
        lambda,
        theta_z: lambda * theta_zeta,
        theta_zeta_hat: theta_zeta,
        theta_partial: lambda * theta_zeta,
        var_y_given_z: sigma_eps_sq + plug_in_inflation,
        var_y_given_zeta_hat: sigma_eps_sq + plug_in_inflation,
        var_y_given_partial: sigma_eps_sq + (1.0 + lambda) * plug_in_inflation,
    })
}
