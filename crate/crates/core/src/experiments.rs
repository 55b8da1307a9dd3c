//! Simulation designs, replication orchestration and aggregation, the
//! synthetic stand-in for the mortality data, and hybrid data construction.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engines::{
    posterior_predictive, run_chain, ChainConfig, ChainInputs, MethodKind, MethodSpec, Param, PosteriorSample,
    PredictiveInputs, StageOneInfo,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    coverage_and_width, mean_and_median, prediction_summary, rmse, summarize, wasserstein2, ParamSummary,
    PredictionSummary,
};
use crate::linalg::{cholesky, mvn_sample, mvn_sample_rows, JitterPolicy};
use crate::model::{
    analytic_partial_posterior, sample_partial_posterior_draws, simulate_stage_one, PartialPosteriorDraws,
    PriorConfig, RegressionTruth, StageOneConfig, TwoStageDataset,
};
use crate::rng::SeededStream;
use crate::weighting::{MomentSource, Shrinkage, WeightReport};

pub const SCHEMA_VERSION: u32 = 1;

/// A sweep counts as degenerate for reporting when its largest weight exceeds this.
pub const HEAVY_WEIGHT: f64 = 0.4;
/// A sweep counts as collapsed for reporting when its ESS is below this.
pub const LOW_ESS: f64 = 10.0;

/// Stream lane reserved for data generation within a replication.
const DATA_LANE: u64 = 0;

/// Stream id for `lane` of replication `rep`.
pub fn stream_id(rep: usize, lane: u64) -> u64 {
    ((rep as u64) << 16) | lane
}

fn method_lane(kind: MethodKind) -> u64 {
    MethodKind::ALL.iter().position(|&k| k == kind).expect("kind is listed") as u64
}

/// Lane of the Gibbs chain for `kind`; lanes do not depend on which other methods run.
pub fn chain_lane(kind: MethodKind) -> u64 {
    1 + 2 * method_lane(kind)
}

pub fn predictive_lane(kind: MethodKind) -> u64 {
    2 + 2 * method_lane(kind)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub name: String,
    pub n: usize,
    pub n_test: usize,
    pub reps: usize,
    pub beta0: f64,
    pub theta_zeta: f64,
    pub sigma_eps_sq: f64,
    pub sigma_u_sq: f64,
    pub sigma_zeta_sq: f64,
    pub rho: f64,
    /// Partial posterior draws `S` per replication.
    pub draws: usize,
    pub is_pool: usize,
    pub ais_r: usize,
    #[serde(default)]
    pub shrinkage: Shrinkage,
    #[serde(default)]
    pub ais_moments: MomentSource,
    pub methods: Vec<MethodKind>,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default = "PriorConfig::simulation_default")]
    pub prior: PriorConfig,
    pub base_seed: u64,
}

pub const DEFAULT_BASE_SEED: u64 = 20_240_417;

/// Chain used by the built-in designs. The oracle mixes slowly in (θζ, σ²ε); at
/// 2500 sweeps the Monte Carlo floor of W2 against it is already near 0.06 for θζ.
pub const SIMULATION_CHAIN: ChainConfig = ChainConfig {
    total_sweeps: 6000,
    burn_in: 1000,
    thin: 1,
    store_zeta: false,
};

impl SimulationDesign {
    /// Example 1: independent units, `n = 200`, `θζ = 4`, `σ²ε = 2`, `σ²u = σ²ζ = 1`.
    pub fn example1() -> Self {
        SimulationDesign {
            name: "example1".into(),
            n: 200,
            n_test: 1000,
            reps: 100,
            beta0: 0.0,
            theta_zeta: 4.0,
            sigma_eps_sq: 2.0,
            sigma_u_sq: 1.0,
            sigma_zeta_sq: 1.0,
            rho: 0.0,
            draws: 500,
            is_pool: 1000,
            ais_r: 500,
            shrinkage: Shrinkage::Auto,
            ais_moments: MomentSource::Known,
            methods: MethodKind::ALL.to_vec(),
            chain: SIMULATION_CHAIN,
            prior: PriorConfig::simulation_default(),
            base_seed: DEFAULT_BASE_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("design '{}': {msg}", self.name)));
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if self.draws < 2 {
            return bad(format!("draws must be at least 2, got {}", self.draws));
        }
        if self.methods.is_empty() {
            return bad("no methods listed".into());
        }
        if !(self.sigma_u_sq > 0.0) || !(self.sigma_zeta_sq > 0.0) || !(self.sigma_eps_sq > 0.0) {
            return bad("variances must be positive".into());
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if !self.beta0.is_finite() || !self.theta_zeta.is_finite() {
            return bad("regression truth must be finite".into());
        }
        for kind in &self.methods {
            self.method_spec(*kind).validate()?;
        }
        self.chain.validate()?;
        self.prior.validate()?;
        Ok(())
    }

    pub fn method_spec(&self, kind: MethodKind) -> MethodSpec {
        MethodSpec {
            kind,
            ais_r: self.ais_r,
            is_pool: self.is_pool,
            shrinkage: self.shrinkage,
            ais_moments: self.ais_moments,
        }
    }

    pub fn stage_one(&self) -> StageOneConfig {
        StageOneConfig {
            n: self.n,
            sigma_u_sq: self.sigma_u_sq,
            sigma_zeta_sq: self.sigma_zeta_sq,
            rho_u: self.rho,
            rho_zeta: self.rho,
        }
    }

    /// SHA-256 of the design's canonical JSON (object keys sorted).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("design serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// The built-in catalog: both main examples and the additional grids.
pub fn builtin_designs() -> Vec<SimulationDesign> {
    let ex1 = SimulationDesign::example1();
    let ex2 = SimulationDesign {
        name: "example2".into(),
        rho: 0.3,
        ..ex1.clone()
    };
    let grid = |name: &str, f: &dyn Fn(&mut SimulationDesign)| {
        let mut d = SimulationDesign {
            name: name.into(),
            n_test: 0,
            methods: MethodKind::ALL
                .into_iter()
                .filter(|&k| k != MethodKind::VanillaIs)
                .collect(),
            ..ex1.clone()
        };
        f(&mut d);
        d
    };
    vec![
        ex1.clone(),
        ex2,
        grid("rho05", &|d| d.rho = 0.5),
        grid("theta1-indep", &|d| d.theta_zeta = 1.0),
        grid("theta1-corr", &|d| {
            d.theta_zeta = 1.0;
            d.rho = 0.3;
        }),
        grid("theta15-indep", &|d| d.theta_zeta = 15.0),
        grid("theta15-corr", &|d| {
            d.theta_zeta = 15.0;
            d.rho = 0.3;
        }),
        grid("sigmazeta4-indep", &|d| d.sigma_zeta_sq = 4.0),
        grid("sigmazeta4-corr", &|d| {
            d.sigma_zeta_sq = 4.0;
            d.rho = 0.3;
        }),
    ]
}

pub fn builtin_design(name: &str) -> Result<SimulationDesign> {
    builtin_designs()
        .into_iter()
        .find(|d| d.name == name)
        .ok_or_else(|| {
            let names: Vec<String> = builtin_designs().into_iter().map(|d| d.name).collect();
            Error::Config(format!("unknown design '{name}', expected one of {}", names.join(", ")))
        })
}

/// Held-out units and their outcomes.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub inputs: PredictiveInputs,
    pub y: DVector<f64>,
}

/// Everything generated for one replication, shared by all methods.
#[derive(Clone, Debug)]
pub struct ReplicationData {
    pub zeta: DVector<f64>,
    pub z: DVector<f64>,
    pub stage_one: StageOneInfo,
    pub draws: PartialPosteriorDraws,
    pub data: TwoStageDataset,
    pub test: Option<TestSet>,
}

impl ReplicationData {
    /// SHA-256 over the outcomes, raw stage-one data and draws.
    pub fn input_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.data.y_obs().iter().chain(self.z.iter()).chain(self.draws.matrix().iter()) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

struct Block {
    zeta: DVector<f64>,
    z: DVector<f64>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    draws: PartialPosteriorDraws,
    y: DVector<f64>,
}

fn simulate_block(design: &SimulationDesign, rng: &mut SeededStream) -> Result<Block> {
    let cfg = design.stage_one();
    let truth = simulate_stage_one(&cfg, rng)?.truth.expect("simulation fills truth");
    let (mean, cov) = analytic_partial_posterior(&truth.z, &cfg.error_cov(), &cfg.prior_cov())?;
    let draws = sample_partial_posterior_draws(&mean, &cov, design.draws, rng)?;
    let sd = design.sigma_eps_sq.sqrt();
    let y = DVector::from_fn(design.n, |i, _| {
        design.beta0 + design.theta_zeta * truth.zeta[i] + sd * rng.standard_normal()
    });
    Ok(Block {
        zeta: truth.zeta,
        z: truth.z,
        mean,
        cov,
        draws,
        y,
    })
}

/// Generate replication `rep`: training data, draws, and (when `n_test > 0`) test units.
///
/// Test units come in independent blocks with the training design's size and
/// correlation, each with its own analytic draws, truncated to `n_test`.
pub fn simulate_replication(design: &SimulationDesign, rep: usize) -> Result<ReplicationData> {
    let mut rng = SeededStream::new(design.base_seed, stream_id(rep, DATA_LANE));
    let train = simulate_block(design, &mut rng)?;
    let n = design.n;
    let data = TwoStageDataset::new(train.y, DMatrix::zeros(n, 0), false)?.with_truth(RegressionTruth {
        beta0: design.beta0,
        theta_zeta: design.theta_zeta,
        beta: vec![],
        sigma_eps_sq: design.sigma_eps_sq,
        zeta: Some(train.zeta.clone()),
    });
    let test = if design.n_test > 0 {
        let blocks = design.n_test.div_ceil(n);
        let mut draw_cols = DMatrix::zeros(design.draws, blocks * n);
        let mut z = DVector::zeros(blocks * n);
        let mut y = DVector::zeros(blocks * n);
        for b in 0..blocks {
            let blk = simulate_block(design, &mut rng)?;
            draw_cols.columns_mut(b * n, n).copy_from(blk.draws.matrix());
            z.rows_mut(b * n, n).copy_from(&blk.z);
            y.rows_mut(b * n, n).copy_from(&blk.y);
        }
        let m = design.n_test;
        Some(TestSet {
            inputs: PredictiveInputs {
                draws: PartialPosteriorDraws::new(draw_cols.columns(0, m).into_owned())?,
                covariates: DMatrix::zeros(m, 0),
                z: Some(z.rows(0, m).into_owned()),
            },
            y: y.rows(0, m).into_owned(),
        })
    } else {
        None
    };
    Ok(ReplicationData {
        zeta: train.zeta,
        z: train.z,
        stage_one: StageOneInfo::new(train.mean, train.cov)?,
        draws: train.draws,
        data,
        test,
    })
}

/// Pooled weight diagnostics over post-burn-in sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub sweeps: usize,
    pub heavy_sweeps: usize,
    pub low_ess_sweeps: usize,
    pub median_ess: f64,
    pub max_weight: f64,
}

impl WeightStats {
    pub fn from_trace(trace: &[WeightReport]) -> Option<Self> {
        if trace.is_empty() {
            return None;
        }
        let ess: Vec<f64> = trace.iter().map(|r| r.ess).collect();
        Some(WeightStats {
            sweeps: trace.len(),
            heavy_sweeps: trace.iter().filter(|r| r.max_weight > HEAVY_WEIGHT).count(),
            low_ess_sweeps: trace.iter().filter(|r| r.ess < LOW_ESS).count(),
            median_ess: mean_and_median(&ess).map_or(f64::NAN, |(_, m)| m),
            max_weight: trace.iter().map(|r| r.max_weight).fold(0.0, f64::max),
        })
    }

    pub fn heavy_share(&self) -> f64 {
        self.heavy_sweeps as f64 / self.sweeps as f64
    }

    pub fn low_ess_share(&self) -> f64 {
        self.low_ess_sweeps as f64 / self.sweeps as f64
    }

    fn merge(a: Option<Self>, b: Option<Self>) -> Option<Self> {
        match (a, b) {
            (Some(a), Some(b)) => Some(WeightStats {
                sweeps: a.sweeps + b.sweeps,
                heavy_sweeps: a.heavy_sweeps + b.heavy_sweeps,
                low_ess_sweeps: a.low_ess_sweeps + b.low_ess_sweeps,
                // Medians do not pool; keep the sweep-weighted average of per-chain medians.
                median_ess: (a.median_ess * a.sweeps as f64 + b.median_ess * b.sweeps as f64)
                    / (a.sweeps + b.sweeps) as f64,
                max_weight: a.max_weight.max(b.max_weight),
            }),
            (a, None) => a,
            (None, b) => b,
        }
    }
}

/// One method's results on one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub rep: usize,
    pub method: MethodKind,
    pub theta_zeta: ParamSummary,
    pub sigma_eps_sq: ParamSummary,
    pub w2_theta_zeta: Option<f64>,
    pub w2_sigma_eps_sq: Option<f64>,
    pub rmse_in_sample: f64,
    pub prediction: Option<PredictionSummary>,
    pub shrink_gamma: Option<f64>,
    pub degenerate_sweeps: usize,
    pub degenerate_after_burn_in: usize,
    pub weights: Option<WeightStats>,
    pub input_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub rep: usize,
    pub method: Option<MethodKind>,
    pub error: String,
}

/// The weight trace of one chain, kept for the first replication only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTrace {
    pub rep: usize,
    pub method: MethodKind,
    pub reports: Vec<WeightReport>,
}

#[derive(Clone, Debug, Default)]
pub struct ReplicationOutcome {
    pub rep: usize,
    pub records: Vec<MethodRecord>,
    pub failures: Vec<Failure>,
    pub traces: Vec<WeightTrace>,
}

/// Run every method of `design` on replication `rep`. Failures are recorded, not returned.
pub fn run_replication(design: &SimulationDesign, rep: usize) -> ReplicationOutcome {
    let mut out = ReplicationOutcome {
        rep,
        ..Default::default()
    };
    let rd = match simulate_replication(design, rep) {
        Ok(rd) => rd,
        Err(e) => {
            out.failures.push(Failure {
                rep,
                method: None,
                error: e.to_string(),
            });
            return out;
        }
    };
    let mut samples: Vec<(MethodKind, PosteriorSample)> = Vec::new();
    let mut partial: Vec<MethodRecord> = Vec::new();
    for &kind in &design.methods {
        match run_method(design, &rd, rep, kind) {
            Ok((record, sample)) => {
                if rep == 0 && !sample.weight_trace.is_empty() {
                    out.traces.push(WeightTrace {
                        rep,
                        method: kind,
                        reports: sample.weight_trace.clone(),
                    });
                }
                partial.push(record);
                samples.push((kind, sample));
            }
            Err(e) => out.failures.push(Failure {
                rep,
                method: Some(kind),
                error: e.to_string(),
            }),
        }
    }
    if let Some((_, oracle)) = samples.iter().find(|(k, _)| *k == MethodKind::OracleGibbs) {
        let oracle_theta = oracle.values(Param::ThetaZeta);
        let oracle_sigma = oracle.values(Param::SigmaEpsSq);
        for (record, (_, sample)) in partial.iter_mut().zip(&samples) {
            record.w2_theta_zeta = wasserstein2(&sample.values(Param::ThetaZeta), &oracle_theta).ok();
            record.w2_sigma_eps_sq = wasserstein2(&sample.values(Param::SigmaEpsSq), &oracle_sigma).ok();
        }
    }
    out.records = partial;
    out
}

fn run_method(
    design: &SimulationDesign,
    rd: &ReplicationData,
    rep: usize,
    kind: MethodKind,
) -> Result<(MethodRecord, PosteriorSample)> {
    let spec = design.method_spec(kind);
    let mut rng = SeededStream::new(design.base_seed, stream_id(rep, chain_lane(kind)));
    let inputs = ChainInputs {
        stage_one: Some(&rd.stage_one),
        z: Some(&rd.z),
    };
    let sample = run_chain(&rd.data, &rd.draws, inputs, &spec, &design.prior, &design.chain, &mut rng)?;
    let theta = summarize(&sample.values(Param::ThetaZeta), Some(design.theta_zeta))?;
    let sigma = summarize(&sample.values(Param::SigmaEpsSq), Some(design.sigma_eps_sq))?;
    let fitted = rd.zeta.map(|z| theta.mean * z + sample.mean(Param::Beta0));
    let rmse_in_sample = rmse(fitted.as_slice(), rd.data.y_obs().as_slice())?;
    let prediction = match &rd.test {
        Some(test) => {
            let mut prng = SeededStream::new(design.base_seed, stream_id(rep, predictive_lane(kind)));
            let pred = posterior_predictive(&sample, &test.inputs, false, &mut prng)?;
            Some(prediction_summary(&pred, &test.y)?)
        }
        None => None,
    };
    let burn = if kind.is_weighted() { design.chain.burn_in } else { 0 };
    let weights = WeightStats::from_trace(sample.weight_trace.get(burn..).unwrap_or(&[]));
    let record = MethodRecord {
        rep,
        method: kind,
        theta_zeta: theta,
        sigma_eps_sq: sigma,
        w2_theta_zeta: None,
        w2_sigma_eps_sq: None,
        rmse_in_sample,
        prediction,
        shrink_gamma: sample.shrink_gamma,
        degenerate_sweeps: sample.degenerate_sweeps,
        degenerate_after_burn_in: sample.degenerate_after_burn_in,
        weights,
        input_hash: rd.input_hash(),
    };
    Ok((record, sample))
}

/// Run replications `reps` of `design` on at most `parallel` worker threads.
///
/// Each replication owns its streams, so results do not depend on `parallel`.
pub fn run_replications(
    design: &SimulationDesign,
    reps: std::ops::Range<usize>,
    parallel: Option<usize>,
) -> Result<Vec<ReplicationOutcome>> {
    design.validate()?;
    let run = || -> Vec<ReplicationOutcome> { reps.clone().into_par_iter().map(|r| run_replication(design, r)).collect() };
    match parallel {
        Some(k) => {
            if k == 0 {
                return Err(Error::Config("parallel worker count must be at least 1".into()));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(run))
        }
        None => Ok(run()),
    }
}

/// Aggregates of one parameter over replications.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamAggregate {
    pub truth: f64,
    pub mean_of_means: f64,
    pub coverage: f64,
    pub mean_width: f64,
    pub w2_mean: Option<f64>,
    pub w2_median: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionAggregate {
    pub coverage: f64,
    pub mean_width: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: MethodKind,
    pub replications: usize,
    pub theta_zeta: ParamAggregate,
    pub sigma_eps_sq: ParamAggregate,
    pub rmse_in_sample: f64,
    pub prediction: Option<PredictionAggregate>,
    pub mean_shrink_gamma: Option<f64>,
    pub degenerate_sweeps: usize,
    pub degenerate_after_burn_in: usize,
    pub weights: Option<WeightStats>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, k) = values.fold((0.0, 0usize), |(s, k), v| (s + v, k + 1));
    s / k as f64
}

fn aggregate_param(summaries: &[ParamSummary], w2: &[Option<f64>], truth: f64) -> Result<ParamAggregate> {
    let cov = coverage_and_width(summaries)?;
    let w2: Option<Vec<f64>> = w2.iter().copied().collect();
    let (w2_mean, w2_median) = match w2.as_deref().and_then(mean_and_median) {
        Some((m, md)) => (Some(m), Some(md)),
        None => (None, None),
    };
    Ok(ParamAggregate {
        truth,
        mean_of_means: mean(summaries.iter().map(|s| s.mean)),
        coverage: cov.coverage,
        mean_width: cov.mean_width,
        w2_mean,
        w2_median,
    })
}

/// Per-method aggregates over replication records, in catalog order.
pub fn aggregate(design: &SimulationDesign, records: &[MethodRecord]) -> Result<Vec<MethodAggregate>> {
    let mut by_method: BTreeMap<MethodKind, Vec<&MethodRecord>> = BTreeMap::new();
    for r in records {
        by_method.entry(r.method).or_default().push(r);
    }
    by_method
        .into_iter()
        .map(|(method, rs)| {
            let theta: Vec<ParamSummary> = rs.iter().map(|r| r.theta_zeta).collect();
            let sigma: Vec<ParamSummary> = rs.iter().map(|r| r.sigma_eps_sq).collect();
            let w2_t: Vec<Option<f64>> = rs.iter().map(|r| r.w2_theta_zeta).collect();
            let w2_s: Vec<Option<f64>> = rs.iter().map(|r| r.w2_sigma_eps_sq).collect();
            let preds: Option<Vec<PredictionSummary>> = rs.iter().map(|r| r.prediction).collect();
            let gammas: Option<Vec<f64>> = rs.iter().map(|r| r.shrink_gamma).collect();
            Ok(MethodAggregate {
                method,
                replications: rs.len(),
                theta_zeta: aggregate_param(&theta, &w2_t, design.theta_zeta)?,
                sigma_eps_sq: aggregate_param(&sigma, &w2_s, design.sigma_eps_sq)?,
                rmse_in_sample: mean(rs.iter().map(|r| r.rmse_in_sample)),
                prediction: preds.filter(|p| !p.is_empty()).map(|p| PredictionAggregate {
                    coverage: mean(p.iter().map(|s| s.coverage)),
                    mean_width: mean(p.iter().map(|s| s.mean_width)),
                    rmse: mean(p.iter().map(|s| s.rmse)),
                }),
                mean_shrink_gamma: gammas.map(|g| mean(g.into_iter())),
                degenerate_sweeps: rs.iter().map(|r| r.degenerate_sweeps).sum(),
                degenerate_after_burn_in: rs.iter().map(|r| r.degenerate_after_burn_in).sum(),
                weights: rs.iter().fold(None, |acc, r| WeightStats::merge(acc, r.weights)),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub software: String,
    pub version: String,
    pub design_hash: String,
    pub base_seed: u64,
    pub stream_scheme: String,
    pub interval: String,
    pub wasserstein: String,
    pub rmse_in_sample: String,
}

impl Provenance {
    pub fn for_design(design: &SimulationDesign) -> Self {
        Provenance {
            software: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            design_hash: design.hash(),
            base_seed: design.base_seed,
            stream_scheme: "chacha8; stream id = rep << 16 | lane; lane 0 data, lane 1+2k chain and 2+2k prediction for method k in catalog order".into(),
            interval: "equal-tailed 95%, linear interpolation between order statistics".into(),
            wasserstein: "quantile coupling on grid (k - 0.5)/K, K = min(T_a, T_b, 1000)".into(),
            rmse_in_sample: "posterior-mean coefficients applied to the true exposure".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub schema_version: u32,
    pub design: SimulationDesign,
    pub provenance: Provenance,
    pub summary: Vec<MethodAggregate>,
    pub records: Vec<MethodRecord>,
    pub failures: Vec<Failure>,
    pub weight_traces: Vec<WeightTrace>,
}

impl StudyResult {
    /// Assemble a result from replication outcomes, ordered by replication then method.
    pub fn from_outcomes(design: &SimulationDesign, mut outcomes: Vec<ReplicationOutcome>) -> Result<Self> {
        outcomes.sort_by_key(|o| o.rep);
        let mut records = Vec::new();
        let mut failures = Vec::new();
        let mut weight_traces = Vec::new();
        for o in outcomes {
            records.extend(o.records);
            failures.extend(o.failures);
            weight_traces.extend(o.traces);
        }
        records.sort_by_key(|r| (r.rep, r.method));
        Ok(StudyResult {
            schema_version: SCHEMA_VERSION,
            summary: aggregate(design, &records)?,
            design: design.clone(),
            provenance: Provenance::for_design(design),
            records,
            failures,
            weight_traces,
        })
    }

    pub fn method(&self, kind: MethodKind) -> Option<&MethodAggregate> {
        self.summary.iter().find(|m| m.method == kind)
    }
}

/// Run all `design.reps` replications and aggregate.
pub fn run_study(design: &SimulationDesign, parallel: Option<usize>) -> Result<StudyResult> {
    let outcomes = run_replications(design, 0..design.reps, parallel)?;
    StudyResult::from_outcomes(design, outcomes)
}

/// Shape of the synthetic stand-in for the county mortality data.
pub const STANDIN_UNITS: usize = 452;
pub const STANDIN_DRAWS: usize = 100;
pub const STANDIN_COVARIATES: usize = 7;

/// Synthetic data with the county-mortality shapes: spatially correlated exposure
/// draws, seven covariates, and a log outcome with a small exposure effect.
#[derive(Clone, Debug)]
pub struct StandIn {
    pub data: TwoStageDataset,
    pub draws: PartialPosteriorDraws,
    pub zeta: DVector<f64>,
    pub coords: Vec<(f64, f64)>,
}

pub const STANDIN_COVARIATE_NAMES: [&str; STANDIN_COVARIATES] =
    ["income", "metro", "prop_black", "prop_no_hs", "state_b", "state_c", "state_d"];

fn exponential_cov(coords: &[(f64, f64)], var: f64, range: f64) -> DMatrix<f64> {
    let n = coords.len();
    DMatrix::from_fn(n, n, |i, j| {
        let (dx, dy) = (coords[i].0 - coords[j].0, coords[i].1 - coords[j].1);
        var * (-(dx * dx + dy * dy).sqrt() / range).exp()
    })
}

pub fn synthetic_standin(seed: u64) -> Result<StandIn> {
    let mut rng = SeededStream::new(seed, 0);
    let n = STANDIN_UNITS;
    let coords: Vec<(f64, f64)> = (0..n).map(|_| (rng.uniform(), rng.uniform())).collect();
    let exposure = cholesky(&exponential_cov(&coords, 2.25, 0.3), JitterPolicy::Escalate)?;
    let mut zeta = mvn_sample(&DVector::zeros(n), &exposure, &mut rng)?;
    zeta.add_scalar_mut(9.0);
    // Stage-one point estimate with spatially correlated error, then draws around it.
    let err = cholesky(&exponential_cov(&coords, 0.36, 0.15), JitterPolicy::Escalate)?;
    let estimate = mvn_sample(&zeta, &err, &mut rng)?;
    let draws = PartialPosteriorDraws::new(mvn_sample_rows(&estimate, &err, STANDIN_DRAWS, &mut rng)?)?;

    let mut x = DMatrix::zeros(n, STANDIN_COVARIATES);
    for i in 0..n {
        x[(i, 0)] = rng.standard_normal();
        x[(i, 1)] = f64::from(rng.uniform() < 0.4);
        x[(i, 2)] = 0.4 * rng.uniform();
        x[(i, 3)] = 0.05 + 0.3 * rng.uniform();
        let state = rng.index(4);
        if state > 0 {
            x[(i, 3 + state)] = 1.0;
        }
    }
    let beta = DVector::from_vec(vec![-0.05, 0.02, 0.3, 0.5, 0.03, -0.02, 0.04]);
    let (beta0, theta, sigma_sq): (f64, f64, f64) = (6.7, 0.01, 0.0064);
    let noise = DVector::from_fn(n, |_, _| sigma_sq.sqrt() * rng.standard_normal());
    let mut log_y = &x * &beta + &zeta * theta + noise;
    log_y.add_scalar_mut(beta0);
    let data = TwoStageDataset::from_log_outcome(log_y, x)?.with_truth(RegressionTruth {
        beta0,
        theta_zeta: theta,
        beta: beta.iter().copied().collect(),
        sigma_eps_sq: sigma_sq,
        zeta: Some(zeta.clone()),
    });
    Ok(StandIn {
        data,
        draws,
        zeta,
        coords,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridDesign {
    pub theta_star: f64,
    #[serde(default = "default_hybrid_count")]
    pub num_datasets: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_hybrid_count() -> usize {
    100
}

impl HybridDesign {
    pub fn new(theta_star: f64) -> Self {
        HybridDesign {
            theta_star,
            num_datasets: default_hybrid_count(),
            seed: 0,
        }
    }
}

/// A hybrid dataset and the retained sweep it was built from.
#[derive(Clone, Debug)]
pub struct HybridDataset {
    pub sweep: usize,
    pub data: TwoStageDataset,
}

fn source_zeta(source: &PosteriorSample, data: &TwoStageDataset) -> Result<DMatrix<f64>> {
    let zd = source.zeta_draws.as_ref().ok_or_else(|| Error::MissingInput {
        method: "hybrid".into(),
        what: "a source sample with stored exposure draws".into(),
    })?;
    if zd.ncols() != data.n() {
        return Err(crate::error::dim_mismatch("source exposure columns", data.n(), zd.ncols()));
    }
    if zd.nrows() != source.len() {
        return Err(crate::error::dim_mismatch("source exposure rows", source.len(), zd.nrows()));
    }
    Ok(zd.clone())
}

fn rebuild(data: &TwoStageDataset, y_obs: DVector<f64>) -> Result<TwoStageDataset> {
    if data.log_outcome() {
        TwoStageDataset::from_log_outcome(y_obs, data.covariates().clone())
    } else {
        TwoStageDataset::new(y_obs, data.covariates().clone(), false)
    }
}

/// Outcomes for sweep `t`: `y_obs + (θ* − θᵗ) ζᵗ` on the model scale.
fn hybrid_outcome(source: &PosteriorSample, zeta: &DMatrix<f64>, data: &TwoStageDataset, t: usize, theta_star: f64) -> DVector<f64> {
    let gap = theta_star - source.draws[t].theta_zeta;
    DVector::from_fn(data.n(), |i, _| data.y_obs()[i] + gap * zeta[(t, i)])
}

/// Hybrid datasets from `num_datasets` retained sweeps chosen uniformly without replacement.
pub fn hybrid_generate(
    source: &PosteriorSample,
    data: &TwoStageDataset,
    design: &HybridDesign,
) -> Result<Vec<HybridDataset>> {
    if !design.theta_star.is_finite() {
        return Err(Error::Config("theta_star must be finite".into()));
    }
    let zeta = source_zeta(source, data)?;
    let t = source.len();
    if design.num_datasets == 0 || design.num_datasets > t {
        return Err(Error::TooFewDraws(format!(
            "{} hybrid datasets requested from {t} retained sweeps",
            design.num_datasets
        )));
    }
    let mut rng = SeededStream::new(design.seed, 0);
    let mut sweeps = index::sample(&mut rng, t, design.num_datasets).into_vec();
    sweeps.sort_unstable();
    sweeps
        .into_iter()
        .map(|s| {
            let d = &source.draws[s];
            let truth = RegressionTruth {
                beta0: d.beta0,
                theta_zeta: design.theta_star,
                beta: d.beta.clone(),
                sigma_eps_sq: d.sigma_eps_sq,
                zeta: Some(zeta.row(s).transpose()),
            };
            Ok(HybridDataset {
                sweep: s,
                data: rebuild(data, hybrid_outcome(source, &zeta, data, s, design.theta_star))?.with_truth(truth),
            })
        })
        .collect()
}

/// One hybrid dataset whose outcomes average the per-sweep hybrid outcomes over all retained sweeps.
pub fn hybrid_mean_variant(source: &PosteriorSample, data: &TwoStageDataset, theta_star: f64) -> Result<TwoStageDataset> {
    if !theta_star.is_finite() {
        return Err(Error::Config("theta_star must be finite".into()));
    }
    let zeta = source_zeta(source, data)?;
    let t = source.len();
    if t == 0 {
        return Err(Error::TooFewDraws("source sample is empty".into()));
    }
    let mut sum = DVector::zeros(data.n());
    for s in 0..t {
        sum += hybrid_outcome(source, &zeta, data, s, theta_star);
    }
    let truth = RegressionTruth {
        beta0: source.mean(Param::Beta0),
        theta_zeta: theta_star,
        beta: (0..data.p()).map(|j| source.mean(Param::Beta(j))).collect(),
        sigma_eps_sq: source.mean(Param::SigmaEpsSq),
        zeta: Some(zeta.row_mean().transpose()),
    };
    Ok(rebuild(data, sum / t as f64)?.with_truth(truth))
}
