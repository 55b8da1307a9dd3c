//! The Gibbs driver, its seven exposure-update strategies, and posterior
//! predictive sampling.
//!
//! Every chain alternates a strategy-specific ζ-step with the shared
//! [`regression_conditional_sweep`]; the strategies differ only in how the
//! next ζ is chosen.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{cholesky, JitterPolicy};
use crate::model::{regression_conditional_sweep, PartialPosteriorDraws, PriorConfig, RegressionState, TwoStageDataset};
use crate::rng::{normalize_log_weights_into, AliasTable, SeededStream};
use crate::weighting::{ais_log_weights_centered, weight_report, MomentEstimate, MomentSource, Shrinkage, WeightReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodKind {
    #[serde(rename = "oracle-gibbs")]
    OracleGibbs,
    #[serde(rename = "plugin-z")]
    PluginZ,
    #[serde(rename = "plugin-zeta-hat")]
    PluginZetaHat,
    #[serde(rename = "partial-posterior")]
    PartialPosterior,
    #[serde(rename = "vanilla-is")]
    VanillaIs,
    #[serde(rename = "iis")]
    Iis,
    #[serde(rename = "ais")]
    Ais,
}

impl MethodKind {
    pub const ALL: [MethodKind; 7] = [
        MethodKind::OracleGibbs,
        MethodKind::PluginZ,
        MethodKind::PluginZetaHat,
        MethodKind::PartialPosterior,
        MethodKind::VanillaIs,
        MethodKind::Iis,
        MethodKind::Ais,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::OracleGibbs => "oracle-gibbs",
            MethodKind::PluginZ => "plugin-z",
            MethodKind::PluginZetaHat => "plugin-zeta-hat",
            MethodKind::PartialPosterior => "partial-posterior",
            MethodKind::VanillaIs => "vanilla-is",
            MethodKind::Iis => "iis",
            MethodKind::Ais => "ais",
        }
    }

    /// Whether the strategy needs the raw stage-one data `z` (directly or through its analytic posterior).
    pub fn requires_raw_z(self) -> bool {
        matches!(self, MethodKind::PluginZ | MethodKind::OracleGibbs)
    }

    pub fn is_weighted(self) -> bool {
        matches!(self, MethodKind::VanillaIs | MethodKind::Iis | MethodKind::Ais)
    }

    /// Plug-in methods hold ζ fixed and so never propagate exposure uncertainty.
    pub fn is_plugin(self) -> bool {
        matches!(self, MethodKind::PluginZ | MethodKind::PluginZetaHat)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = MethodKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::Config(format!("unknown method '{s}', expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    #[serde(default = "default_ais_r")]
    pub ais_r: usize,
    #[serde(default = "default_is_pool")]
    pub is_pool: usize,
    #[serde(default)]
    pub shrinkage: Shrinkage,
    #[serde(default)]
    pub ais_moments: MomentSource,
}

fn default_ais_r() -> usize {
    500
}

fn default_is_pool() -> usize {
    1000
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        MethodSpec {
            kind,
            ais_r: default_ais_r(),
            is_pool: default_is_pool(),
            shrinkage: Shrinkage::Auto,
            ais_moments: MomentSource::Sample,
        }
    }

    pub fn requires_raw_z(&self) -> bool {
        self.kind.requires_raw_z()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ais_r == 0 {
            return Err(Error::Config("ais_r must be at least 1".into()));
        }
        if self.is_pool == 0 {
            return Err(Error::Config("is_pool must be at least 1".into()));
        }
        if let Shrinkage::Fixed(g) = self.shrinkage {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Config(format!("shrinkage must lie in [0, 1], got {g}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub total_sweeps: usize,
    pub burn_in: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default)]
    pub store_zeta: bool,
}

fn default_thin() -> usize {
    1
}

/// Smallest number of retained sweeps accepted by [`ChainConfig::validate`].
pub const MIN_RETAINED: usize = 100;

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            total_sweeps: 2500,
            burn_in: 500,
            thin: 1,
            store_zeta: false,
        }
    }
}

impl ChainConfig {
    pub fn retained(&self) -> usize {
        self.total_sweeps.saturating_sub(self.burn_in) / self.thin.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        if self.burn_in >= self.total_sweeps {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than total_sweeps ({})",
                self.burn_in, self.total_sweeps
            )));
        }
        if self.retained() < MIN_RETAINED {
            return Err(Error::Config(format!(
                "chain retains {} sweeps; at least {MIN_RETAINED} are required",
                self.retained()
            )));
        }
        Ok(())
    }

    fn keeps(&self, sweep: usize) -> bool {
        sweep >= self.burn_in
            && (sweep - self.burn_in) % self.thin == self.thin - 1
            && (sweep - self.burn_in) / self.thin < self.retained()
    }
}

/// Fully known Gaussian partial posterior, `[ζ | z] ~ MVN(mean, cov)`, with its
/// eigendecomposition cached so each exact conditional draw costs `O(n²)`.
#[derive(Clone, Debug)]
pub struct StageOneInfo {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
    /// `Qᵀ mean`
    rotated_mean: DVector<f64>,
}

impl StageOneInfo {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(dim_mismatch("partial posterior covariance size", n, cov.nrows()));
        }
        let eig = SymmetricEigen::new(cov.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 1e-14 * max.max(f64::MIN_POSITIVE)) {
            return Err(Error::NotPositiveDefinite(format!(
                ": partial posterior covariance (smallest eigenvalue {min:e})"
            )));
        }
        let rotated_mean = eig.eigenvectors.tr_mul(&mean);
        Ok(StageOneInfo {
            mean,
            cov,
            eigvecs: eig.eigenvectors,
            eigvals: eig.eigenvalues,
            rotated_mean,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn n_units(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and precision of `[ζ | y, z, θ]` for a Gaussian partial posterior, by dense solves.
pub fn oracle_zeta_conditional(
    y_obs: &DVector<f64>,
    covariates: &DMatrix<f64>,
    state: &RegressionState,
    zeta_hat: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = zeta_hat.len();
    if y_obs.len() != n {
        return Err(dim_mismatch("outcome length", n, y_obs.len()));
    }
    if covariates.nrows() != n {
        return Err(dim_mismatch("covariate rows", n, covariates.nrows()));
    }
    let prior = cholesky(cov, JitterPolicy::Exact)?;
    let c = state.theta_zeta * state.theta_zeta / state.sigma_eps_sq;
    let mut precision = prior.inverse();
    for i in 0..n {
        precision[(i, i)] += c;
    }
    let resid = y_obs - state.offsets(covariates);
    let rhs = prior.solve(zeta_hat) + resid * (state.theta_zeta / state.sigma_eps_sq);
    let post = cholesky(&precision, JitterPolicy::Exact)
        .map_err(|_| Error::NotPositiveDefinite(": oracle conditional precision".into()))?;
    Ok((post.solve(&rhs), precision))
}

/// Result of one ζ-step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepOutcome {
    pub report: Option<WeightReport>,
    /// Weights were degenerate and the step fell back to uniform resampling.
    pub degenerate: bool,
}

/// One strategy for updating ζ between regression sweeps.
pub trait ZetaStep {
    /// Starting exposure vector.
    fn initial(&self) -> DVector<f64>;

    /// Replace `zeta` with the next exposure draw given the current stage-two parameters.
    fn step(
        &mut self,
        data: &TwoStageDataset,
        state: &RegressionState,
        zeta: &mut DVector<f64>,
        rng: &mut SeededStream,
    ) -> Result<StepOutcome>;

    fn shrink_gamma(&self) -> Option<f64> {
        None
    }
}

/// ζ held at a fixed vector for every sweep.
pub struct FixedStep {
    value: DVector<f64>,
}

impl FixedStep {
    pub fn new(value: DVector<f64>) -> Self {
        FixedStep { value }
    }
}

impl ZetaStep for FixedStep {
    fn initial(&self) -> DVector<f64> {
        self.value.clone()
    }

    fn step(&mut self, _: &TwoStageDataset, _: &RegressionState, zeta: &mut DVector<f64>, _: &mut SeededStream) -> Result<StepOutcome> {
        zeta.copy_from(&self.value);
        Ok(StepOutcome::default())
    }
}

struct PartialPosteriorStep<'a> {
    draws: &'a PartialPosteriorDraws,
}

impl ZetaStep for PartialPosteriorStep<'_> {
    fn initial(&self) -> DVector<f64> {
        self.draws.column_means()
    }

    fn step(&mut self, _: &TwoStageDataset, _: &RegressionState, zeta: &mut DVector<f64>, rng: &mut SeededStream) -> Result<StepOutcome> {
        let j = rng.index(self.draws.n_draws());
        copy_row(self.draws.matrix(), j, zeta);
        Ok(StepOutcome::default())
    }
}

fn copy_row(m: &DMatrix<f64>, r: usize, out: &mut DVector<f64>) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[(r, i)];
    }
}

/// Normalize `log_w` into `w`, or fill `w` uniformly when the weights are degenerate.
fn normalize_or_uniform(log_w: &[f64], w: &mut [f64]) -> bool {
    match normalize_log_weights_into(log_w, w) {
        Ok(()) => false,
        Err(_) => {
            let u = 1.0 / w.len() as f64;
            w.fill(u);
            true
        }
    }
}

/// Unnormalized per-unit weights `exp(ℓₛ − max ℓ)` with `ℓₛ = −(r − θ ζˢ)² / (2σ²)`.
///
/// Returns `(Σ w, Σ w²)`; degenerate inputs fall back to unit weights and return `None`.
fn unit_weights(unit_draws: &[f64], resid: f64, theta: f64, sigma_sq: f64, out: &mut [f64]) -> Option<(f64, f64)> {
    let inv = 0.5 / sigma_sq;
    let mut max = f64::NEG_INFINITY;
    for (o, &z) in out.iter_mut().zip(unit_draws) {
        let r = resid - theta * z;
        *o = -r * r * inv;
        max = max.max(*o);
    }
    if !max.is_finite() {
        out.fill(1.0);
        return None;
    }
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
        sum_sq += *o * *o;
    }
    Some((sum, sum_sq))
}

/// Full report for one unit's weights as computed by [`unit_weights`].
fn unit_report(unit_draws: &[f64], resid: f64, theta: f64, sigma_sq: f64, buf: &mut [f64]) -> WeightReport {
    let total = unit_weights(unit_draws, resid, theta, sigma_sq, buf).map_or(buf.len() as f64, |(s, _)| s);
    for w in buf.iter_mut() {
        *w /= total;
    }
    weight_report(buf)
}

struct VanillaIsStep {
    /// `m × n` proposal pool.
    pool: DMatrix<f64>,
    pool_sq: DVector<f64>,
    initial: DVector<f64>,
    log_w: Vec<f64>,
    w: Vec<f64>,
}

impl VanillaIsStep {
    fn new(draws: &PartialPosteriorDraws, pool_size: usize, rng: &mut SeededStream) -> Self {
        let s = draws.n_draws();
        let n = draws.n_units();
        let pool = if pool_size <= s {
            draws.matrix().rows(0, pool_size).into_owned()
        } else {
            let extra: Vec<usize> = (0..pool_size - s).map(|_| rng.index(s)).collect();
            let m = draws.matrix();
            DMatrix::from_fn(pool_size, n, |r, i| if r < s { m[(r, i)] } else { m[(extra[r - s], i)] })
        };
        let pool_sq = DVector::from_iterator(pool.nrows(), pool.row_iter().map(|r| r.norm_squared()));
        VanillaIsStep {
            log_w: vec![0.0; pool.nrows()],
            w: vec![0.0; pool.nrows()],
            pool_sq,
            pool,
            initial: draws.column_means(),
        }
    }
}

impl ZetaStep for VanillaIsStep {
    fn initial(&self) -> DVector<f64> {
        self.initial.clone()
    }

    fn step(&mut self, data: &TwoStageDataset, state: &RegressionState, zeta: &mut DVector<f64>, rng: &mut SeededStream) -> Result<StepOutcome> {
        // Σᵢ (rᵢ − θζᵢ)² = Σ r² − 2θ ζ·r + θ² Σ ζ², evaluated for every pool row at once.
        let resid = data.y_obs() - state.offsets(data.covariates());
        let r_sq = resid.norm_squared();
        let cross = &self.pool * &resid;
        let theta = state.theta_zeta;
        let inv = 0.5 / state.sigma_eps_sq;
        for k in 0..self.log_w.len() {
            let ss = r_sq - 2.0 * theta * cross[k] + theta * theta * self.pool_sq[k];
            self.log_w[k] = -ss * inv;
        }
        let degenerate = normalize_or_uniform(&self.log_w, &mut self.w);
        let k = scan_index(&self.w, 1.0, rng);
        copy_row(&self.pool, k, zeta);
        Ok(StepOutcome {
            report: Some(weight_report(&self.w)),
            degenerate,
        })
    }
}

struct IisStep<'a> {
    draws: &'a PartialPosteriorDraws,
    w: Vec<f64>,
}

impl ZetaStep for IisStep<'_> {
    fn initial(&self) -> DVector<f64> {
        self.draws.column_means()
    }

    /// The reported weights are those of the unit with the smallest ESS.
    fn step(&mut self, data: &TwoStageDataset, state: &RegressionState, zeta: &mut DVector<f64>, rng: &mut SeededStream) -> Result<StepOutcome> {
        let resid = data.y_obs() - state.offsets(data.covariates());
        let (theta, s2) = (state.theta_zeta, state.sigma_eps_sq);
        let mut worst = (f64::INFINITY, 0);
        let mut degenerate = false;
        for i in 0..self.draws.n_units() {
            let unit = self.draws.unit(i);
            let (sum, ess) = match unit_weights(unit, resid[i], theta, s2, &mut self.w) {
                Some((sum, sum_sq)) => (sum, sum * sum / sum_sq),
                None => {
                    degenerate = true;
                    (self.w.len() as f64, self.w.len() as f64)
                }
            };
            zeta[i] = unit[scan_index(&self.w, sum, rng)];
            if ess < worst.0 {
                worst = (ess, i);
            }
        }
        let i = worst.1;
        Ok(StepOutcome {
            report: Some(unit_report(self.draws.unit(i), resid[i], theta, s2, &mut self.w)),
            degenerate,
        })
    }
}

/// Draw an index proportional to unnormalized `weights` summing to `total`.
fn scan_index(weights: &[f64], total: f64, rng: &mut SeededStream) -> usize {
    let u = rng.uniform() * total;
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

struct AisStep<'a> {
    draws: &'a PartialPosteriorDraws,
    moments: MomentEstimate,
    r: usize,
    w: Vec<f64>,
    table: AliasTable,
    /// `R × n` proposal draw indices into each unit's draws.
    picks: Vec<u32>,
    /// `R × n` proposals centered at the moment mean.
    delta: DMatrix<f64>,
    scratch: DMatrix<f64>,
    ais_log_w: DVector<f64>,
    ais_w: Vec<f64>,
}

impl<'a> AisStep<'a> {
    fn new(draws: &'a PartialPosteriorDraws, r: usize, moments: MomentEstimate) -> Result<Self> {
        let s = draws.n_draws();
        let n = draws.n_units();
        if moments.n_units() != n {
            return Err(dim_mismatch("moment dimension", n, moments.n_units()));
        }
        Ok(AisStep {
            moments,
            draws,
            r,
            w: vec![0.0; s],
            table: AliasTable::default(),
            picks: vec![0; r * n],
            delta: DMatrix::zeros(r, n),
            scratch: DMatrix::zeros(r, n),
            ais_log_w: DVector::zeros(r),
            ais_w: vec![0.0; r],
        })
    }
}

impl ZetaStep for AisStep<'_> {
    fn initial(&self) -> DVector<f64> {
        self.draws.column_means()
    }

    fn step(&mut self, data: &TwoStageDataset, state: &RegressionState, zeta: &mut DVector<f64>, rng: &mut SeededStream) -> Result<StepOutcome> {
        let resid = data.y_obs() - state.offsets(data.covariates());
        let r = self.r;
        let mut degenerate = false;
        for i in 0..self.draws.n_units() {
            let unit = self.draws.unit(i);
            let total = match unit_weights(unit, resid[i], state.theta_zeta, state.sigma_eps_sq, &mut self.w) {
                Some((sum, _)) => sum,
                None => {
                    degenerate = true;
                    self.w.len() as f64
                }
            };
            self.table.rebuild(&self.w, total)?;
            let mean = self.moments.mean()[i];
            let picks = &mut self.picks[i * r..(i + 1) * r];
            let col = &mut self.delta.as_mut_slice()[i * r..(i + 1) * r];
            for (p, d) in picks.iter_mut().zip(col.iter_mut()) {
                let s = self.table.sample(rng);
                *p = s as u32;
                *d = unit[s] - mean;
            }
        }
        ais_log_weights_centered(&self.delta, &self.moments, &mut self.scratch, &mut self.ais_log_w);
        degenerate |= normalize_or_uniform(self.ais_log_w.as_slice(), &mut self.ais_w);
        let k = scan_index(&self.ais_w, 1.0, rng);
        for (i, z) in zeta.iter_mut().enumerate() {
            *z = self.draws.unit(i)[self.picks[i * r + k] as usize];
        }
        Ok(StepOutcome {
            report: Some(weight_report(&self.ais_w)),
            degenerate,
        })
    }

    fn shrink_gamma(&self) -> Option<f64> {
        Some(self.moments.shrink_gamma())
    }
}

struct OracleStep<'a> {
    info: &'a StageOneInfo,
}

impl ZetaStep for OracleStep<'_> {
    fn initial(&self) -> DVector<f64> {
        self.info.mean.clone()
    }

    fn step(&mut self, data: &TwoStageDataset, state: &RegressionState, zeta: &mut DVector<f64>, rng: &mut SeededStream) -> Result<StepOutcome> {
        // In the eigenbasis of Σ the conditional precision is diag(1/λₖ + θ²/σ²).
        let theta = state.theta_zeta;
        let c = theta * theta / state.sigma_eps_sq;
        let resid = data.y_obs() - state.offsets(data.covariates());
        let rotated_resid = self.info.eigvecs.tr_mul(&resid);
        let coords = DVector::from_fn(self.info.n_units(), |k, _| {
            let prec = 1.0 / self.info.eigvals[k] + c;
            let mean = (self.info.rotated_mean[k] / self.info.eigvals[k]
                + theta / state.sigma_eps_sq * rotated_resid[k])
                / prec;
            mean + rng.standard_normal() / prec.sqrt()
        });
        zeta.copy_from(&(&self.info.eigvecs * coords));
        Ok(StepOutcome::default())
    }
}

/// One retained draw of the stage-two parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDraw {
    pub beta0: f64,
    pub theta_zeta: f64,
    pub beta: Vec<f64>,
    pub sigma_eps_sq: f64,
    pub sigma_theta: f64,
}

impl From<&RegressionState> for ParamDraw {
    fn from(s: &RegressionState) -> Self {
        ParamDraw {
            beta0: s.beta0,
            theta_zeta: s.theta_zeta,
            beta: s.beta.iter().copied().collect(),
            sigma_eps_sq: s.sigma_eps_sq,
            sigma_theta: s.sigma_theta,
        }
    }
}

/// A scalar parameter of the stage-two model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    Beta0,
    ThetaZeta,
    SigmaEpsSq,
    Beta(usize),
}

impl Param {
    pub fn name(self) -> String {
        match self {
            Param::Beta0 => "beta0".into(),
            Param::ThetaZeta => "theta_zeta".into(),
            Param::SigmaEpsSq => "sigma_eps_sq".into(),
            Param::Beta(j) => format!("beta_{}", j + 1),
        }
    }

    pub fn of(self, d: &ParamDraw) -> f64 {
        match self {
            Param::Beta0 => d.beta0,
            Param::ThetaZeta => d.theta_zeta,
            Param::SigmaEpsSq => d.sigma_eps_sq,
            Param::Beta(j) => d.beta[j],
        }
    }
}

#[derive(Clone, Debug)]
pub struct PosteriorSample {
    pub method: MethodSpec,
    pub base_seed: u64,
    pub stream_id: u64,
    pub chain: ChainConfig,
    pub draws: Vec<ParamDraw>,
    /// Retained ζ draws, `T × n`, when the chain config asks for them.
    pub zeta_draws: Option<DMatrix<f64>>,
    /// Posterior mean of `β0 + θζ ζ + Xβ` at each sweep's own ζ.
    pub fitted_mean: DVector<f64>,
    /// Per-sweep weight diagnostics, burn-in included; empty for unweighted methods.
    pub weight_trace: Vec<WeightReport>,
    pub degenerate_sweeps: usize,
    pub degenerate_after_burn_in: usize,
    pub shrink_gamma: Option<f64>,
}

impl PosteriorSample {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn values(&self, param: Param) -> Vec<f64> {
        self.draws.iter().map(|d| param.of(d)).collect()
    }

    pub fn mean(&self, param: Param) -> f64 {
        self.draws.iter().map(|d| param.of(d)).sum::<f64>() / self.draws.len() as f64
    }
}

/// Inputs a chain may need beyond the draws.
#[derive(Clone, Copy, Debug, Default)]
pub struct ChainInputs<'a> {
    pub stage_one: Option<&'a StageOneInfo>,
    pub z: Option<&'a DVector<f64>>,
}

/// Build the ζ-step for `spec`. Vanilla IS draws its pool from `rng`.
pub fn make_step<'a>(
    spec: &MethodSpec,
    draws: &'a PartialPosteriorDraws,
    inputs: ChainInputs<'a>,
    rng: &mut SeededStream,
) -> Result<Box<dyn ZetaStep + 'a>> {
    spec.validate()?;
    let n = draws.n_units();
    let missing = |what: &str| Error::MissingInput {
        method: spec.kind.as_str().into(),
        what: what.into(),
    };
    Ok(match spec.kind {
        MethodKind::PluginZ => {
            let z = inputs.z.ok_or_else(|| missing("the observed stage-one data z"))?;
            if z.len() != n {
                return Err(dim_mismatch("z length", n, z.len()));
            }
            Box::new(FixedStep::new(z.clone()))
        }
        MethodKind::PluginZetaHat => Box::new(FixedStep::new(draws.column_means())),
        MethodKind::PartialPosterior => Box::new(PartialPosteriorStep { draws }),
        MethodKind::VanillaIs => Box::new(VanillaIsStep::new(draws, spec.is_pool, rng)),
        MethodKind::Iis => Box::new(IisStep { draws, w: vec![0.0; draws.n_draws()] }),
        MethodKind::Ais => {
            let moments = match spec.ais_moments {
                MomentSource::Sample => MomentEstimate::estimate(draws, spec.shrinkage)?,
                MomentSource::Known => {
                    let info = inputs
                        .stage_one
                        .ok_or_else(|| missing("the analytic stage-one partial posterior"))?;
                    MomentEstimate::from_moments(info.mean().clone(), info.cov().clone(), spec.shrinkage)?
                }
            };
            Box::new(AisStep::new(draws, spec.ais_r, moments)?)
        }
        MethodKind::OracleGibbs => {
            let info = inputs
                .stage_one
                .ok_or_else(|| missing("the analytic stage-one partial posterior"))?;
            if info.n_units() != n {
                return Err(dim_mismatch("stage-one posterior size", n, info.n_units()));
            }
            Box::new(OracleStep { info })
        }
    })
}

/// Run a Gibbs chain for `spec`.
pub fn run_chain(
    data: &TwoStageDataset,
    draws: &PartialPosteriorDraws,
    inputs: ChainInputs<'_>,
    spec: &MethodSpec,
    prior: &PriorConfig,
    chain: &ChainConfig,
    rng: &mut SeededStream,
) -> Result<PosteriorSample> {
    if draws.n_units() != data.n() {
        return Err(dim_mismatch("draw columns vs outcomes", data.n(), draws.n_units()));
    }
    let mut step = make_step(spec, draws, inputs, rng)?;
    run_chain_with(step.as_mut(), data, spec, prior, chain, rng)
}

/// Run a Gibbs chain with an arbitrary ζ-step; [`run_chain`] delegates here.
pub fn run_chain_with(
    step: &mut dyn ZetaStep,
    data: &TwoStageDataset,
    spec: &MethodSpec,
    prior: &PriorConfig,
    chain: &ChainConfig,
    rng: &mut SeededStream,
) -> Result<PosteriorSample> {
    chain.validate()?;
    prior.validate()?;
    let n = data.n();
    let mut zeta = step.initial();
    if zeta.len() != n {
        return Err(dim_mismatch("initial exposure length", n, zeta.len()));
    }
    let mut state = RegressionState::initial(data.p(), prior, zeta.clone());
    let retained = chain.retained();
    let mut draws = Vec::with_capacity(retained);
    let mut zeta_draws = chain.store_zeta.then(|| DMatrix::zeros(retained, n));
    let mut fitted_sum = DVector::zeros(n);
    let mut weight_trace = Vec::new();
    let mut degenerate_sweeps = 0;
    let mut degenerate_after_burn_in = 0;

    for sweep in 0..chain.total_sweeps {
        let outcome = step.step(data, &state, &mut zeta, rng)?;
        if let Some(r) = outcome.report {
            weight_trace.push(r);
        }
        if outcome.degenerate {
            degenerate_sweeps += 1;
            if sweep >= chain.burn_in {
                degenerate_after_burn_in += 1;
            }
        }
        state = regression_conditional_sweep(data, &zeta, prior, &state, rng)?;
        if chain.keeps(sweep) {
            let t = draws.len();
            if let Some(zd) = zeta_draws.as_mut() {
                zd.row_mut(t).copy_from(&zeta.transpose());
            }
            fitted_sum += state.offsets(data.covariates()) + &zeta * state.theta_zeta;
            draws.push(ParamDraw::from(&state));
        }
    }
    let fitted_mean = fitted_sum / draws.len() as f64;
    Ok(PosteriorSample {
        method: *spec,
        base_seed: rng.base_seed(),
        stream_id: rng.stream_id(),
        chain: *chain,
        draws,
        zeta_draws,
        fitted_mean,
        weight_trace,
        degenerate_sweeps,
        degenerate_after_burn_in,
        shrink_gamma: step.shrink_gamma(),
    })
}

/// Exposure inputs for new units.
#[derive(Clone, Debug)]
pub struct PredictiveInputs {
    /// Partial posterior draws for the test units.
    pub draws: PartialPosteriorDraws,
    /// `n_test × p` covariates.
    pub covariates: DMatrix<f64>,
    /// Observed stage-one data for the test units, used by the raw plug-in.
    pub z: Option<DVector<f64>>,
}

/// `T × n_test` posterior predictive draws of the outcome on its original scale.
///
/// Plug-in methods fix ζ̃ (at z̃ or the test draw means); every other method
/// draws a whole row of the test partial posterior for each retained θ.
pub fn posterior_predictive(
    sample: &PosteriorSample,
    test: &PredictiveInputs,
    log_outcome: bool,
    rng: &mut SeededStream,
) -> Result<DMatrix<f64>> {
    if sample.is_empty() {
        return Err(Error::TooFewDraws("posterior sample is empty".into()));
    }
    let n = test.draws.n_units();
    if test.covariates.nrows() != n {
        return Err(dim_mismatch("test covariate rows", n, test.covariates.nrows()));
    }
    let p = sample.draws[0].beta.len();
    if test.covariates.ncols() != p {
        return Err(dim_mismatch("test covariate columns", p, test.covariates.ncols()));
    }
    let fixed = match sample.method.kind {
        MethodKind::PluginZ => {
            let z = test.z.as_ref().ok_or_else(|| Error::MissingInput {
                method: sample.method.kind.as_str().into(),
                what: "observed stage-one data for the test units".into(),
            })?;
            if z.len() != n {
                return Err(dim_mismatch("test z length", n, z.len()));
            }
            Some(z.clone())
        }
        MethodKind::PluginZetaHat => Some(test.draws.column_means()),
        _ => None,
    };
    let mut out = DMatrix::zeros(sample.len(), n);
    let mut zeta = DVector::zeros(n);
    for (t, d) in sample.draws.iter().enumerate() {
        match &fixed {
            Some(f) => zeta.copy_from(f),
            None => copy_row(test.draws.matrix(), rng.index(test.draws.n_draws()), &mut zeta),
        }
        let sd = d.sigma_eps_sq.sqrt();
        for i in 0..n {
            let mut eta = d.beta0 + d.theta_zeta * zeta[i];
            for j in 0..p {
                eta += test.covariates[(i, j)] * d.beta[j];
            }
            let v = eta + sd * rng.standard_normal();
            out[(t, i)] = if log_outcome { v.exp() } else { v };
        }
    }
    Ok(out)
}

/// Batch-means Monte Carlo standard error of the mean of a chain.
pub fn batch_means_se(values: &[f64], batches: usize) -> f64 {
    let b = values.len() / batches;
    if b == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..batches)
        .map(|k| values[k * b..(k + 1) * b].iter().sum::<f64>() / b as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
    (var / batches as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{analytic_partial_posterior, sample_partial_posterior_draws, simulate_stage_one, StageOneConfig};

    fn scalar_state(theta: f64, sigma_sq: f64, beta0: f64) -> RegressionState {
        let mut s = RegressionState::initial(0, &PriorConfig::simulation_default(), DVector::zeros(1));
        s.theta_zeta = theta;
        s.sigma_eps_sq = sigma_sq;
        s.beta0 = beta0;
        s
    }

    #[test]
    fn method_names_round_trip() {
        for k in MethodKind::ALL {
            assert_eq!(k.as_str().parse::<MethodKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.as_str()));
        }
        assert!("gibbs".parse::<MethodKind>().is_err());
        assert!(MethodKind::PluginZ.requires_raw_z() && MethodKind::OracleGibbs.requires_raw_z());
        assert!(!MethodKind::Ais.requires_raw_z());
    }

    #[test]
    fn chain_config_rules() {
        assert_eq!(ChainConfig::default().retained(), 2000);
        let bad = ChainConfig { total_sweeps: 500, burn_in: 500, thin: 1, store_zeta: false };
        assert!(bad.validate().is_err());
        let short = ChainConfig { total_sweeps: 150, burn_in: 100, thin: 1, store_zeta: false };
        assert!(short.validate().is_err());
        let thinned = ChainConfig { total_sweeps: 1000, burn_in: 100, thin: 3, store_zeta: false };
        assert_eq!(thinned.retained(), 300);
        assert_eq!((0..1000).filter(|&t| thinned.keeps(t)).count(), 300);
    }

    #[test]
    fn scalar_oracle_conditional() {
        let state = scalar_state(2.0, 2.0, 0.5);
        let y = DVector::from_element(1, 3.5);
        let (mean, prec) = oracle_zeta_conditional(
            &y,
            &DMatrix::zeros(1, 0),
            &state,
            &DVector::from_element(1, 1.0),
            &DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap();
        assert!((prec[(0, 0)] - 4.0).abs() < 1e-14);
        assert!((mean[0] - 1.25).abs() < 1e-14);

        // Trapezoid integral of likelihood × prior for the same case.
        let h = 1e-3;
        let (mut z0, mut z1) = (0.0, 0.0);
        for k in 0..=12_000 {
            let x = -5.0 + k as f64 * h;
            let f = (-(3.0 - 2.0 * x).powi(2) / 4.0 - (x - 1.0).powi(2)).exp();
            let wt = if k == 0 || k == 12_000 { 0.5 } else { 1.0 };
            z0 += wt * f;
            z1 += wt * f * x;
        }
        assert!((z1 / z0 - 1.25).abs() < 1e-9);
    }

    #[test]
    fn zero_slope_oracle_is_partial_posterior() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8]);
        let zhat = DVector::from_vec(vec![0.3, -0.2]);
        let y = DVector::from_vec(vec![5.0, -3.0]);
        let state = {
            let mut s = scalar_state(0.0, 1.5, 0.0);
            s.zeta = DVector::zeros(2);
            s
        };
        let (mean, prec) = oracle_zeta_conditional(&y, &DMatrix::zeros(2, 0), &state, &zhat, &cov).unwrap();
        assert!((mean - &zhat).amax() < 1e-12);
        assert!((prec.try_inverse().unwrap() - cov).amax() < 1e-12);
    }

    #[test]
    fn oracle_conditional_matches_grid_quadrature() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.3, 0.3, 0.6]);
        let zhat = DVector::from_vec(vec![0.4, -0.7]);
        let x = DMatrix::from_row_slice(2, 1, &[1.0, -0.5]);
        let y = DVector::from_vec(vec![2.0, -1.0]);
        let mut state = RegressionState::initial(1, &PriorConfig::simulation_default(), DVector::zeros(2));
        state.beta0 = 0.2;
        state.theta_zeta = 1.7;
        state.beta = DVector::from_element(1, 0.3);
        state.sigma_eps_sq = 0.8;
        let (mean, prec) = oracle_zeta_conditional(&y, &x, &state, &zhat, &cov).unwrap();

        let cov_inv = cov.clone().try_inverse().unwrap();
        let offs = state.offsets(&x);
        let (lo, hi, k) = (-6.0, 6.0, 600);
        let h = (hi - lo) / k as f64;
        let mut brute = Vec::with_capacity(k * k);
        let mut exact = Vec::with_capacity(k * k);
        let det = prec.determinant();
        for a in 0..k {
            for b in 0..k {
                let p = DVector::from_vec(vec![lo + (a as f64 + 0.5) * h, lo + (b as f64 + 0.5) * h]);
                let d = &p - &zhat;
                let mut log = -0.5 * (d.transpose() * &cov_inv * &d)[(0, 0)];
                for i in 0..2 {
                    let r = y[i] - offs[i] - state.theta_zeta * p[i];
                    log -= 0.5 * r * r / state.sigma_eps_sq;
                }
                brute.push(log.exp());
                let e = &p - &mean;
                let q = (e.transpose() * &prec * &e)[(0, 0)];
                exact.push(det.sqrt() / (2.0 * std::f64::consts::PI) * (-0.5 * q).exp() * h * h);
            }
        }
        let total: f64 = brute.iter().sum();
        let tv: f64 = 0.5 * brute.iter().zip(&exact).map(|(b, e)| (b / total - e).abs()).sum::<f64>();
        assert!(tv < 1e-4, "total variation {tv}");
    }

    #[test]
    fn stage_one_info_rejects_singular() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(StageOneInfo::new(DVector::zeros(2), cov).is_err());
    }

    struct Setup {
        data: TwoStageDataset,
        draws: PartialPosteriorDraws,
        info: StageOneInfo,
        z: DVector<f64>,
    }

    fn setup(n: usize, s: usize, sigma_u_sq: f64, rho: f64, seed: u64) -> Setup {
        let mut rng = SeededStream::new(seed, 0);
        let cfg = StageOneConfig { n, sigma_u_sq, sigma_zeta_sq: 1.0, rho_u: rho, rho_zeta: rho };
        let truth = simulate_stage_one(&cfg, &mut rng).unwrap().truth.unwrap();
        let (m, c) = analytic_partial_posterior(&truth.z, &cfg.error_cov(), &cfg.prior_cov()).unwrap();
        let draws = sample_partial_posterior_draws(&m, &c, s, &mut rng).unwrap();
        let y = DVector::from_fn(n, |i, _| 4.0 * truth.zeta[i] + 2f64.sqrt() * rng.standard_normal());
        Setup {
            data: TwoStageDataset::new(y, DMatrix::zeros(n, 0), false).unwrap(),
            draws,
            info: StageOneInfo::new(m, c).unwrap(),
            z: truth.z,
        }
    }

    fn run(st: &Setup, spec: MethodSpec, chain: ChainConfig, stream: u64) -> PosteriorSample {
        let mut rng = SeededStream::new(99, stream);
        let inputs = ChainInputs { stage_one: Some(&st.info), z: Some(&st.z) };
        run_chain(&st.data, &st.draws, inputs, &spec, &PriorConfig::simulation_default(), &chain, &mut rng).unwrap()
    }

    #[test]
    fn missing_inputs_are_reported() {
        let st = setup(10, 20, 1.0, 0.0, 1);
        let mut rng = SeededStream::new(1, 0);
        let chain = ChainConfig { total_sweeps: 200, burn_in: 50, thin: 1, store_zeta: false };
        for kind in [MethodKind::PluginZ, MethodKind::OracleGibbs] {
            let err = run_chain(&st.data, &st.draws, ChainInputs::default(), &MethodSpec::new(kind), &PriorConfig::simulation_default(), &chain, &mut rng)
                .unwrap_err();
            assert!(matches!(err, Error::MissingInput { .. }), "{err}");
        }
        let spec = MethodSpec { ais_moments: MomentSource::Known, ..MethodSpec::new(MethodKind::Ais) };
        let inputs = ChainInputs { stage_one: None, z: Some(&st.z) };
        let err = run_chain(&st.data, &st.draws, inputs, &spec, &PriorConfig::simulation_default(), &chain, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::MissingInput { .. }), "{err}");
    }

    #[test]
    fn methods_agree_without_measurement_error() {
        let st = setup(60, 200, 1e-4, 0.3, 2);
        let chain = ChainConfig { total_sweeps: 2200, burn_in: 200, thin: 1, store_zeta: false };
        let results: Vec<(MethodKind, f64, f64)> = MethodKind::ALL
            .iter()
            .enumerate()
            .map(|(k, &kind)| {
                let mut spec = MethodSpec::new(kind);
                spec.ais_r = 50;
                spec.is_pool = 200;
                let s = run(&st, spec, chain, k as u64);
                let th = s.values(Param::ThetaZeta);
                (kind, s.mean(Param::ThetaZeta), batch_means_se(&th, 20))
            })
            .collect();
        let (_, m0, se0) = results[0];
        for &(kind, m, se) in &results[1..] {
            let tol = 3.0 * (se * se + se0 * se0).sqrt();
            assert!((m - m0).abs() < tol.max(1e-3), "{kind}: {m} vs oracle {m0} (tol {tol})");
        }
    }

    #[test]
    fn resampling_methods_draw_from_the_pool() {
        let st = setup(12, 30, 1.0, 0.3, 3);
        let chain = ChainConfig { total_sweeps: 300, burn_in: 100, thin: 1, store_zeta: true };
        let m = st.draws.matrix();
        for kind in [MethodKind::VanillaIs, MethodKind::Iis, MethodKind::Ais, MethodKind::PartialPosterior] {
            let mut spec = MethodSpec::new(kind);
            spec.ais_r = 40;
            spec.is_pool = 45;
            let s = run(&st, spec, chain, 7);
            let zd = s.zeta_draws.as_ref().unwrap();
            assert_eq!(zd.nrows(), 200);
            for t in 0..zd.nrows() {
                for i in 0..12 {
                    assert!(m.column(i).iter().any(|&v| v == zd[(t, i)]), "{kind} sweep {t} unit {i}");
                }
                if matches!(kind, MethodKind::VanillaIs | MethodKind::PartialPosterior) {
                    assert!((0..30).any(|r| m.row(r) == zd.row(t)), "{kind} row {t} not a pool row");
                }
            }
            if kind.is_weighted() {
                assert_eq!(s.weight_trace.len(), 300);
            } else {
                assert!(s.weight_trace.is_empty());
            }
        }
    }

    #[test]
    fn injected_step_reproduces_plugin() {
        let st = setup(20, 30, 1.0, 0.0, 4);
        let chain = ChainConfig { total_sweeps: 300, burn_in: 100, thin: 2, store_zeta: false };
        let spec = MethodSpec::new(MethodKind::PluginZ);
        let a = run(&st, spec, chain, 5);
        let mut rng = SeededStream::new(99, 5);
        let mut step = FixedStep::new(st.z.clone());
        let b = run_chain_with(&mut step, &st.data, &spec, &PriorConfig::simulation_default(), &chain, &mut rng).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.draws.len(), 100);
    }

    #[test]
    fn chains_are_reproducible() {
        let st = setup(20, 30, 1.0, 0.3, 5);
        let chain = ChainConfig { total_sweeps: 200, burn_in: 50, thin: 1, store_zeta: false };
        let mut spec = MethodSpec::new(MethodKind::Ais);
        spec.ais_r = 20;
        let a = run(&st, spec, chain, 1);
        let b = run(&st, spec, chain, 1);
        assert_eq!(a.draws, b.draws);
        let c = run(&st, spec, chain, 2);
        assert_ne!(a.draws, c.draws);
    }

    #[test]
    fn predictive_collapses_without_noise() {
        let draws = vec![
            ParamDraw { beta0: 1.0, theta_zeta: 2.0, beta: vec![0.5], sigma_eps_sq: 1e-300, sigma_theta: 1000.0 };
            5
        ];
        let sample = PosteriorSample {
            method: MethodSpec::new(MethodKind::PluginZetaHat),
            base_seed: 0,
            stream_id: 0,
            chain: ChainConfig::default(),
            draws,
            zeta_draws: None,
            fitted_mean: DVector::zeros(0),
            weight_trace: vec![],
            degenerate_sweeps: 0,
            degenerate_after_burn_in: 0,
            shrink_gamma: None,
        };
        let test = PredictiveInputs {
            draws: PartialPosteriorDraws::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 3.0])).unwrap(),
            covariates: DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
            z: None,
        };
        let mut rng = SeededStream::new(0, 0);
        let pred = posterior_predictive(&sample, &test, false, &mut rng).unwrap();
        for t in 0..5 {
            assert!((pred[(t, 0)] - (1.0 + 2.0 * 1.0 + 0.5)).abs() < 1e-12);
            assert!((pred[(t, 1)] - (1.0 + 2.0 * 2.0 + 1.0)).abs() < 1e-12);
        }
        let mut raw = sample.clone();
        raw.method = MethodSpec::new(MethodKind::PluginZ);
        assert!(matches!(posterior_predictive(&raw, &test, false, &mut rng), Err(Error::MissingInput { .. })));
        let logged = posterior_predictive(&sample, &test, true, &mut rng).unwrap();
        assert!((logged[(0, 0)] - 3.5f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn batch_means_of_iid_noise() {
        let mut rng = SeededStream::new(3, 0);
        let v: Vec<f64> = (0..20_000).map(|_| rng.standard_normal()).collect();
        let se = batch_means_se(&v, 20);
        assert!((se - 1.0 / (20_000f64).sqrt()).abs() < 0.004, "{se}");
    }
}
