//! Command line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::engines::{run_chain, ChainInputs, MethodKind, Param, StageOneInfo};
use crate::error::{Error, Result};
use crate::evaluation::summarize;
use crate::experiments::{
    chain_lane, hybrid_generate, hybrid_mean_variant, run_study, simulate_replication, stream_id, HybridDesign,
    WeightStats, SCHEMA_VERSION,
};
use crate::io::{
    default_names, load_design, load_run_config, persist_fit, persist_study, read_dataset, read_draws, read_fit,
    read_study, write_dataset, write_draws, write_json, write_report, DatasetFile, FitSummary, ParamReport,
    ReportFormat, RunConfig,
};
use crate::model::analytic_partial_posterior;
use crate::rng::SeededStream;
use crate::weighting::MomentSource;

/// Environment variable that overrides the seed of a fit config.
pub const SEED_ENV: &str = "TWOSTAGE_SEED";

#[derive(Debug, Parser)]
#[command(name = "twostage", version, about = "Two-stage Bayesian inference from partial posterior draws")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write one simulated replication of a design.
    Simulate {
        /// Built-in design name or design JSON file.
        #[arg(long)]
        design: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        rep: usize,
    },
    /// Fit one method to a dataset and its partial posterior draws.
    Fit {
        #[arg(long)]
        method: MethodKind,
        #[arg(long)]
        draws: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        covariates: Option<PathBuf>,
        /// Model log y instead of y.
        #[arg(long)]
        log_outcome: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation study.
    Study {
        #[arg(long)]
        design: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
        /// Worker threads; defaults to the available cores.
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Build hybrid datasets from a fit run with stored exposure draws.
    Hybrid {
        /// Output directory of a previous `fit`.
        #[arg(long)]
        source: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        theta_star: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        num_datasets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Table 1 aggregates and plot data from a study directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { design, out, rep } => simulate(&design, &out, rep),
        Command::Fit {
            method,
            draws,
            data,
            covariates,
            log_outcome,
            config,
            out,
        } => fit(method, &draws, &data, covariates.as_deref(), log_outcome, config.as_deref(), &out),
        Command::Study {
            design,
            out,
            reps,
            parallel,
        } => {
            let mut design = load_design(&design)?;
            if let Some(r) = reps {
                design.reps = r;
            }
            let result = run_study(&design, parallel)?;
            persist_study(&out, &result)
        }
        Command::Hybrid {
            source,
            theta_star,
            out,
            num_datasets,
            seed,
        } => hybrid(&source, theta_star, &out, num_datasets, seed),
        Command::Report { input, format, out } => {
            let result = read_study(&input)?;
            let format = match format {
                Format::Csv => ReportFormat::Csv,
                Format::Json => ReportFormat::Json,
            };
            write_report(out.as_deref().unwrap_or(&input), &result, format)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))
}

#[derive(Serialize)]
struct SimulationTruth<'a> {
    schema_version: u32,
    design_hash: String,
    rep: usize,
    beta0: f64,
    theta_zeta: f64,
    sigma_eps_sq: f64,
    zeta: &'a [f64],
}

fn simulate(design: &str, out: &Path, rep: usize) -> Result<()> {
    let design = load_design(design)?;
    let rd = simulate_replication(&design, rep)?;
    create_dir(out)?;
    write_draws(&out.join("draws.csv"), rd.draws.matrix())?;
    write_dataset(&out.join("data.csv"), &rd.data, Some(&rd.z), &[])?;
    if let Some(test) = &rd.test {
        write_draws(&out.join("test_draws.csv"), test.inputs.draws.matrix())?;
        let test_data = crate::model::TwoStageDataset::new(test.y.clone(), test.inputs.covariates.clone(), false)?;
        write_dataset(&out.join("test_data.csv"), &test_data, test.inputs.z.as_ref(), &[])?;
    }
    // A fit config reproducing the design's settings, with the stage-one model for the oracle.
    let config = RunConfig {
        seed: design.base_seed,
        chain: design.chain,
        prior: design.prior,
        ais_r: design.ais_r,
        is_pool: design.is_pool,
        shrinkage: design.shrinkage,
        ais_moments: design.ais_moments,
        stage_one: Some(design.stage_one()),
    };
    write_json(&out.join("config.json"), &config)?;
    write_json(
        &out.join("truth.json"),
        &SimulationTruth {
            schema_version: SCHEMA_VERSION,
            design_hash: design.hash(),
            rep,
            beta0: design.beta0,
            theta_zeta: design.theta_zeta,
            sigma_eps_sq: design.sigma_eps_sq,
            zeta: rd.zeta.as_slice(),
        },
    )
}

fn fit(
    method: MethodKind,
    draws: &Path,
    data: &Path,
    covariates: Option<&Path>,
    log_outcome: bool,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut config = match config {
        Some(p) => load_run_config(p)?,
        None => RunConfig::default(),
    };
    if let Ok(s) = std::env::var(SEED_ENV) {
        config.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}='{s}' is not an unsigned integer")))?;
    }
    let spec = config.method_spec(method);
    spec.validate()?;
    let dataset: DatasetFile = read_dataset(data, covariates, log_outcome)?;
    let draws = read_draws(draws)?;
    if draws.n_units() != dataset.data.n() {
        return Err(crate::error::dim_mismatch(
            "draws columns vs dataset rows",
            dataset.data.n(),
            draws.n_units(),
        ));
    }
    if method.requires_raw_z() && dataset.z.is_none() {
        return Err(Error::MissingInput {
            method: method.to_string(),
            what: "a 'z' column in the dataset".into(),
        });
    }
    let needs_stage_one =
        method == MethodKind::OracleGibbs || (method == MethodKind::Ais && spec.ais_moments == MomentSource::Known);
    let stage_one = match (needs_stage_one, &config.stage_one) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::MissingInput {
                method: method.to_string(),
                what: "a stage_one model in the config".into(),
            })
        }
        (true, Some(s1)) => {
            let z = dataset.z.as_ref().ok_or_else(|| Error::MissingInput {
                method: method.to_string(),
                what: "a 'z' column in the dataset".into(),
            })?;
            if s1.n != dataset.data.n() {
                return Err(crate::error::dim_mismatch("stage_one.n vs dataset rows", dataset.data.n(), s1.n));
            }
            s1.validate()?;
            let (mean, cov) = analytic_partial_posterior(z, &s1.error_cov(), &s1.prior_cov())?;
            Some(StageOneInfo::new(mean, cov)?)
        }
    };
    let inputs = ChainInputs {
        stage_one: stage_one.as_ref(),
        z: dataset.z.as_ref(),
    };
    let mut rng = SeededStream::new(config.seed, stream_id(0, chain_lane(method)));
    let sample = run_chain(&dataset.data, &draws, inputs, &spec, &config.prior, &config.chain, &mut rng)?;

    let mut params = vec![Param::Beta0, Param::ThetaZeta, Param::SigmaEpsSq];
    params.extend((0..dataset.data.p()).map(Param::Beta));
    let params = params
        .into_iter()
        .map(|p| {
            Ok(ParamReport {
                param: p.name(),
                summary: summarize(&sample.values(p), None)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let burn = if method.is_weighted() { config.chain.burn_in } else { 0 };
    let weights = WeightStats::from_trace(sample.weight_trace.get(burn..).unwrap_or(&[]));
    let names = if dataset.covariate_names.len() == dataset.data.p() {
        dataset.covariate_names.clone()
    } else {
        default_names(dataset.data.p())
    };
    let summary = FitSummary {
        schema_version: SCHEMA_VERSION,
        method: spec,
        chain: config.chain,
        base_seed: config.seed,
        stream_id: sample.stream_id,
        n_units: dataset.data.n(),
        n_covariates: dataset.data.p(),
        n_draws: draws.n_draws(),
        log_outcome,
        covariate_names: names,
        retained: sample.len(),
        params,
        shrink_gamma: sample.shrink_gamma,
        degenerate_sweeps: sample.degenerate_sweeps,
        degenerate_after_burn_in: sample.degenerate_after_burn_in,
        median_ess: weights.map(|w| w.median_ess),
        input_hash: input_hash(&dataset, &draws),
    };
    persist_fit(out, &sample, &dataset, &summary)
}

fn input_hash(dataset: &DatasetFile, draws: &crate::model::PartialPosteriorDraws) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    let z = dataset.z.iter().flat_map(|z| z.iter());
    for v in dataset.data.y_obs().iter().chain(z).chain(draws.matrix().iter()) {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Serialize)]
struct HybridManifest {
    schema_version: u32,
    theta_star: f64,
    seed: u64,
    source_method: MethodKind,
    files: Vec<HybridEntry>,
    mean_variant: String,
}

#[derive(Serialize)]
struct HybridEntry {
    file: String,
    sweep: usize,
}

fn hybrid(source: &Path, theta_star: f64, out: &Path, num_datasets: usize, seed: u64) -> Result<()> {
    let (sample, dataset, summary) = read_fit(source)?;
    let design = HybridDesign {
        theta_star,
        num_datasets,
        seed,
    };
    let sets = hybrid_generate(&sample, &dataset.data, &design)?;
    let mean = hybrid_mean_variant(&sample, &dataset.data, theta_star)?;
    create_dir(out)?;
    let names = &summary.covariate_names;
    let mut files = Vec::with_capacity(sets.len());
    for (k, h) in sets.iter().enumerate() {
        let file = format!("hybrid_{:03}.csv", k + 1);
        write_dataset(&out.join(&file), &h.data, dataset.z.as_ref(), names)?;
        files.push(HybridEntry { file, sweep: h.sweep });
    }
    write_dataset(&out.join("hybrid_mean.csv"), &mean, dataset.z.as_ref(), names)?;
    write_json(
        &out.join("hybrid.json"),
        &HybridManifest {
            schema_version: SCHEMA_VERSION,
            theta_star,
            seed,
            source_method: summary.method.kind,
            files,
            mean_variant: "hybrid_mean.csv".into(),
        },
    )
}
