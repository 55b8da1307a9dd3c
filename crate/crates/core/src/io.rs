//! CSV and JSON ingest and persistence.
//!
//! Draws files have a header `unit_1,...,unit_n` and one draw per row. Dataset
//! files have a `y` column, an optional `z` column, and covariates in the rest.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::engines::{ChainConfig, MethodKind, MethodSpec, Param, ParamDraw, PosteriorSample};
use crate::error::{dim_mismatch, Error, Result};
use crate::evaluation::ParamSummary;
use crate::experiments::{builtin_design, MethodAggregate, SimulationDesign, StudyResult, SCHEMA_VERSION};
use crate::model::{PartialPosteriorDraws, TwoStageDataset};
use crate::weighting::WeightReport;

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
    Ok(csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => io_error(path, e),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    }
}

fn parse_cell(path: &Path, line: u64, column: &str, cell: &str) -> Result<f64> {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse(format!(
            "{} row {line}, column {column}: '{cell}' is not a finite number",
            path.display()
        ))),
    }
}

/// Rows of a numeric CSV with their header; rejects ragged and non-finite rows.
fn read_numeric(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = open_csv(path)?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Parse(format!("{}: missing header row", path.display())));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Parse(format!(
                "{} row {line}: {} fields, header has {}",
                path.display(),
                rec.len(),
                header.len()
            )));
        }
        let row = rec
            .iter()
            .zip(&header)
            .map(|(cell, col)| parse_cell(path, line, col, cell))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

fn to_matrix(rows: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

/// Read a draws file into an `S × n` matrix.
pub fn read_draws(path: &Path) -> Result<PartialPosteriorDraws> {
    let (header, rows) = read_numeric(path)?;
    for (j, name) in header.iter().enumerate() {
        if *name != format!("unit_{}", j + 1) {
            return Err(Error::Parse(format!(
                "{}: column {} is named '{name}', expected 'unit_{}'",
                path.display(),
                j + 1,
                j + 1
            )));
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: no draws", path.display())));
    }
    PartialPosteriorDraws::new(to_matrix(&rows, header.len()))
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_rows<I, R>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

fn strings(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn write_matrix(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    write_rows(path, header, m.row_iter().map(|r| r.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>()))
}

pub fn write_draws(path: &Path, draws: &DMatrix<f64>) -> Result<()> {
    let header: Vec<String> = (1..=draws.ncols()).map(|j| format!("unit_{j}")).collect();
    write_matrix(path, &header, draws)
}

/// A dataset file: outcomes, optional stage-one data `z`, named covariates.
#[derive(Clone, Debug)]
pub struct DatasetFile {
    pub data: TwoStageDataset,
    pub z: Option<DVector<f64>>,
    pub covariate_names: Vec<String>,
}

/// Read outcomes (and optionally `z`) from `data`, covariates from its other columns
/// followed by those of `covariates`. Files align by row order.
pub fn read_dataset(data: &Path, covariates: Option<&Path>, log_outcome: bool) -> Result<DatasetFile> {
    let (header, rows) = read_numeric(data)?;
    let y_col = header
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| Error::Parse(format!("{}: no 'y' column", data.display())))?;
    let z_col = header.iter().position(|h| h == "z");
    let n = rows.len();
    if n == 0 {
        return Err(Error::Parse(format!("{}: no rows", data.display())));
    }
    let mut names: Vec<String> = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for (j, h) in header.iter().enumerate() {
        if j != y_col && Some(j) != z_col {
            names.push(h.clone());
            cols.push(rows.iter().map(|r| r[j]).collect());
        }
    }
    if let Some(path) = covariates {
        let (ch, crows) = read_numeric(path)?;
        if crows.len() != n {
            return Err(dim_mismatch("covariate file rows vs dataset rows", n, crows.len()));
        }
        for (j, h) in ch.iter().enumerate() {
            names.push(h.clone());
            cols.push(crows.iter().map(|r| r[j]).collect());
        }
    }
    for (j, name) in names.iter().enumerate() {
        if names[..j].contains(name) {
            return Err(Error::Parse(format!("duplicate covariate column '{name}'")));
        }
    }
    let y = DVector::from_fn(n, |i, _| rows[i][y_col]);
    let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    Ok(DatasetFile {
        data: TwoStageDataset::new(y, x, log_outcome)?,
        z: z_col.map(|c| DVector::from_fn(n, |i, _| rows[i][c])),
        covariate_names: names,
    })
}

/// Write outcomes on their original scale, then `z` if present, then covariates.
pub fn write_dataset(path: &Path, data: &TwoStageDataset, z: Option<&DVector<f64>>, names: &[String]) -> Result<()> {
    if names.len() != data.p() {
        return Err(dim_mismatch("covariate names", data.p(), names.len()));
    }
    if let Some(z) = z {
        if z.len() != data.n() {
            return Err(dim_mismatch("z length", data.n(), z.len()));
        }
    }
    let mut header = vec!["y".to_string()];
    if z.is_some() {
        header.push("z".into());
    }
    header.extend(names.iter().cloned());
    let rows = (0..data.n()).map(|i| {
        let mut row = vec![fmt_f64(data.y()[i])];
        if let Some(z) = z {
            row.push(fmt_f64(z[i]));
        }
        row.extend(data.covariates().row(i).iter().map(|&v| fmt_f64(v)));
        row
    });
    write_rows(path, &header, rows)
}

/// Default covariate names `x_1..x_p`.
pub fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x_{j}")).collect()
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(|e| io_error(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_error(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// A design file as written by `study`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignFile {
    pub schema_version: u32,
    pub design_hash: String,
    pub design: SimulationDesign,
}

/// A built-in design name, or a JSON file holding either a bare design or a [`DesignFile`].
pub fn load_design(name_or_path: &str) -> Result<SimulationDesign> {
    let path = Path::new(name_or_path);
    if !path.exists() {
        return builtin_design(name_or_path);
    }
    let value: serde_json::Value = read_json(path)?;
    let design = if value.get("design").is_some() {
        serde_json::from_value::<DesignFile>(value).map(|f| f.design)
    } else {
        serde_json::from_value::<SimulationDesign>(value)
    }
    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    design.validate()?;
    Ok(design)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySummaryFile {
    pub schema_version: u32,
    pub design_name: String,
    pub design_hash: String,
    pub base_seed: u64,
    pub replications: usize,
    pub failures: usize,
    pub methods: Vec<MethodAggregate>,
}

pub const STUDY_RESULT: &str = "result.json";

/// Write a study: full result, summary, long-format records, weight traces, predictions.
pub fn persist_study(dir: &Path, result: &StudyResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    write_json(&dir.join(STUDY_RESULT), result)?;
    write_json(
        &dir.join("design.json"),
        &DesignFile {
            schema_version: SCHEMA_VERSION,
            design_hash: result.provenance.design_hash.clone(),
            design: result.design.clone(),
        },
    )?;
    write_json(
        &dir.join("summary.json"),
        &StudySummaryFile {
            schema_version: SCHEMA_VERSION,
            design_name: result.design.name.clone(),
            design_hash: result.provenance.design_hash.clone(),
            base_seed: result.design.base_seed,
            replications: result.design.reps,
            failures: result.failures.len(),
            methods: result.summary.clone(),
        },
    )?;

    let header = strings(&[
        "rep", "method", "param", "truth", "mean", "sd", "lower", "upper", "width", "contains_truth", "w2_to_oracle",
        "rmse_in_sample", "shrink_gamma", "degenerate_sweeps", "degenerate_after_burn_in", "input_hash",
    ]);
    let mut rows = Vec::new();
    for r in &result.records {
        for (param, s, truth, w2) in [
            (Param::ThetaZeta, &r.theta_zeta, result.design.theta_zeta, r.w2_theta_zeta),
            (Param::SigmaEpsSq, &r.sigma_eps_sq, result.design.sigma_eps_sq, r.w2_sigma_eps_sq),
        ] {
            rows.push(vec![
                r.rep.to_string(),
                r.method.to_string(),
                param.name(),
                fmt_f64(truth),
                fmt_f64(s.mean),
                fmt_f64(s.sd),
                fmt_f64(s.lower),
                fmt_f64(s.upper),
                fmt_f64(s.width),
                s.contains_truth.map(|b| b.to_string()).unwrap_or_default(),
                fmt_opt(w2),
                fmt_f64(r.rmse_in_sample),
                fmt_opt(r.shrink_gamma),
                r.degenerate_sweeps.to_string(),
                r.degenerate_after_burn_in.to_string(),
                r.input_hash.clone(),
            ]);
        }
    }
    write_rows(&dir.join("replications.csv"), &header, rows)?;

    let header = strings(&["rep", "method", "coverage", "mean_width", "rmse"]);
    let rows = result.records.iter().filter_map(|r| {
        r.prediction.map(|p| {
            vec![r.rep.to_string(), r.method.to_string(), fmt_f64(p.coverage), fmt_f64(p.mean_width), fmt_f64(p.rmse)]
        })
    });
    write_rows(&dir.join("predictions.csv"), &header, rows)?;

    write_traces(&dir.join("weight_traces.csv"), result)?;

    let header = strings(&["rep", "method", "error"]);
    let rows = result.failures.iter().map(|f| {
        vec![f.rep.to_string(), f.method.map(|m| m.to_string()).unwrap_or_default(), f.error.clone()]
    });
    write_rows(&dir.join("failures.csv"), &header, rows)
}

fn write_traces(path: &Path, result: &StudyResult) -> Result<()> {
    let header = strings(&["rep", "method", "sweep", "ess", "max_weight", "entropy"]);
    let rows = result.weight_traces.iter().flat_map(|t| {
        t.reports.iter().enumerate().map(move |(k, r)| {
            vec![
                t.rep.to_string(),
                t.method.to_string(),
                (k + 1).to_string(),
                fmt_f64(r.ess),
                fmt_f64(r.max_weight),
                fmt_f64(r.entropy),
            ]
        })
    });
    write_rows(path, &header, rows)
}

pub fn read_study(dir: &Path) -> Result<StudyResult> {
    let result: StudyResult = read_json(&dir.join(STUDY_RESULT))?;
    if result.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse(format!(
            "{}: schema version {} is not supported",
            dir.display(),
            result.schema_version
        )));
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub method: MethodKind,
    pub w2_theta_zeta: Option<f64>,
    pub w2_sigma_eps_sq: Option<f64>,
    pub w2_theta_zeta_median: Option<f64>,
    pub w2_sigma_eps_sq_median: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub method: MethodKind,
    pub param: String,
    pub truth: f64,
    pub mean_of_means: f64,
    pub coverage: f64,
    pub mean_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub design_name: String,
    pub design_hash: String,
    pub table1: Vec<Table1Row>,
    pub coverage: Vec<CoverageRow>,
}

impl Report {
    pub fn from_study(result: &StudyResult) -> Self {
        let table1 = result
            .summary
            .iter()
            .map(|m| Table1Row {
                method: m.method,
                w2_theta_zeta: m.theta_zeta.w2_mean,
                w2_sigma_eps_sq: m.sigma_eps_sq.w2_mean,
                w2_theta_zeta_median: m.theta_zeta.w2_median,
                w2_sigma_eps_sq_median: m.sigma_eps_sq.w2_median,
            })
            .collect();
        let coverage = result
            .summary
            .iter()
            .flat_map(|m| {
                [(Param::ThetaZeta, m.theta_zeta), (Param::SigmaEpsSq, m.sigma_eps_sq)].map(|(p, a)| CoverageRow {
                    method: m.method,
                    param: p.name(),
                    truth: a.truth,
                    mean_of_means: a.mean_of_means,
                    coverage: a.coverage,
                    mean_width: a.mean_width,
                })
            })
            .collect();
        Report {
            schema_version: SCHEMA_VERSION,
            design_name: result.design.name.clone(),
            design_hash: result.provenance.design_hash.clone(),
            table1,
            coverage,
        }
    }
}

/// Table 1 aggregates plus per-figure data (posterior means and widths, coverage, weight traces).
pub fn write_report(dir: &Path, result: &StudyResult, format: ReportFormat) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let report = Report::from_study(result);
    match format {
        ReportFormat::Json => write_json(&dir.join("table1.json"), &report)?,
        ReportFormat::Csv => {
            let header = strings(&["method", "w2_theta_zeta", "w2_sigma_eps_sq", "w2_theta_zeta_median", "w2_sigma_eps_sq_median"]);
            let rows = report.table1.iter().map(|r| {
                vec![
                    r.method.to_string(),
                    fmt_opt(r.w2_theta_zeta),
                    fmt_opt(r.w2_sigma_eps_sq),
                    fmt_opt(r.w2_theta_zeta_median),
                    fmt_opt(r.w2_sigma_eps_sq_median),
                ]
            });
            write_rows(&dir.join("table1.csv"), &header, rows)?;
            let header = strings(&["method", "param", "truth", "mean_of_means", "coverage", "mean_width"]);
            let rows = report.coverage.iter().map(|r| {
                vec![
                    r.method.to_string(),
                    r.param.clone(),
                    fmt_f64(r.truth),
                    fmt_f64(r.mean_of_means),
                    fmt_f64(r.coverage),
                    fmt_f64(r.mean_width),
                ]
            });
            write_rows(&dir.join("coverage.csv"), &header, rows)?;
        }
    }
    let header = strings(&["rep", "method", "param", "mean", "lower", "upper", "width"]);
    let rows = result.records.iter().flat_map(|r| {
        [(Param::ThetaZeta, r.theta_zeta), (Param::SigmaEpsSq, r.sigma_eps_sq)].map(|(p, s)| {
            vec![
                r.rep.to_string(),
                r.method.to_string(),
                p.name(),
                fmt_f64(s.mean),
                fmt_f64(s.lower),
                fmt_f64(s.upper),
                fmt_f64(s.width),
            ]
        })
    });
    write_rows(&dir.join("posterior_means.csv"), &header, rows)?;
    write_traces(&dir.join("weight_traces.csv"), result)
}

/// Settings for a single `fit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default = "crate::model::PriorConfig::simulation_default")]
    pub prior: crate::model::PriorConfig,
    #[serde(default = "default_ais_r")]
    pub ais_r: usize,
    #[serde(default = "default_is_pool")]
    pub is_pool: usize,
    #[serde(default)]
    pub shrinkage: crate::weighting::Shrinkage,
    /// `known` requires `stage_one`.
    #[serde(default)]
    pub ais_moments: crate::weighting::MomentSource,
    /// Known stage-one model; required by the oracle.
    #[serde(default)]
    pub stage_one: Option<crate::model::StageOneConfig>,
}

fn default_seed() -> u64 {
    crate::experiments::DEFAULT_BASE_SEED
}

fn default_ais_r() -> usize {
    500
}

fn default_is_pool() -> usize {
    1000
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl RunConfig {
    pub fn method_spec(&self, kind: MethodKind) -> MethodSpec {
        MethodSpec {
            kind,
            ais_r: self.ais_r,
            is_pool: self.is_pool,
            shrinkage: self.shrinkage,
            ais_moments: self.ais_moments,
        }
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub param: String,
    #[serde(flatten)]
    pub summary: ParamSummary,
}

/// Summary of a single fit; also what `hybrid` needs to rebuild the source sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub schema_version: u32,
    pub method: MethodSpec,
    pub chain: ChainConfig,
    pub base_seed: u64,
    pub stream_id: u64,
    pub n_units: usize,
    pub n_covariates: usize,
    pub n_draws: usize,
    pub log_outcome: bool,
    pub covariate_names: Vec<String>,
    pub retained: usize,
    pub params: Vec<ParamReport>,
    pub shrink_gamma: Option<f64>,
    pub degenerate_sweeps: usize,
    pub degenerate_after_burn_in: usize,
    pub median_ess: Option<f64>,
    pub input_hash: String,
}

pub const FIT_SUMMARY: &str = "fit_summary.json";
pub const FIT_SAMPLES: &str = "samples.csv";
pub const FIT_ZETA: &str = "zeta_draws.csv";
pub const FIT_DATASET: &str = "dataset.csv";

fn sample_header(p: usize) -> Vec<String> {
    let mut h = strings(&["beta0", "theta_zeta", "sigma_eps_sq", "sigma_theta"]);
    h.extend((1..=p).map(|j| format!("beta_{j}")));
    h
}

pub fn write_samples(path: &Path, draws: &[ParamDraw], p: usize) -> Result<()> {
    let rows = draws.iter().map(|d| {
        let mut row: Vec<String> = [d.beta0, d.theta_zeta, d.sigma_eps_sq, d.sigma_theta].map(fmt_f64).to_vec();
        row.extend(d.beta.iter().map(|&b| fmt_f64(b)));
        row
    });
    write_rows(path, &sample_header(p), rows)
}

pub fn read_samples(path: &Path) -> Result<Vec<ParamDraw>> {
    let (header, rows) = read_numeric(path)?;
    if header.len() < 4 || header != sample_header(header.len() - 4) {
        return Err(Error::Parse(format!("{}: unexpected sample columns", path.display())));
    }
    Ok(rows
        .into_iter()
        .map(|r| ParamDraw {
            beta0: r[0],
            theta_zeta: r[1],
            sigma_eps_sq: r[2],
            sigma_theta: r[3],
            beta: r[4..].to_vec(),
        })
        .collect())
}

/// Write `samples.csv`, `dataset.csv`, `zeta_draws.csv` (when stored) and `fit_summary.json`.
pub fn persist_fit(dir: &Path, sample: &PosteriorSample, dataset: &DatasetFile, summary: &FitSummary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    write_samples(&dir.join(FIT_SAMPLES), &sample.draws, dataset.data.p())?;
    write_dataset(&dir.join(FIT_DATASET), &dataset.data, dataset.z.as_ref(), &dataset.covariate_names)?;
    if let Some(z) = &sample.zeta_draws {
        write_draws(&dir.join(FIT_ZETA), z)?;
    }
    write_json(&dir.join(FIT_SUMMARY), summary)
}

/// Rebuild a fitted sample and its dataset from a `fit` output directory.
pub fn read_fit(dir: &Path) -> Result<(PosteriorSample, DatasetFile, FitSummary)> {
    let summary: FitSummary = read_json(&dir.join(FIT_SUMMARY))?;
    let dataset = read_dataset(&dir.join(FIT_DATASET), None, summary.log_outcome)?;
    let draws = read_samples(&dir.join(FIT_SAMPLES))?;
    let zeta_path = dir.join(FIT_ZETA);
    let zeta_draws = if zeta_path.exists() { Some(read_draws(&zeta_path)?.matrix().clone()) } else { None };
    if draws.iter().any(|d| d.beta.len() != dataset.data.p()) {
        return Err(dim_mismatch("sample coefficients", dataset.data.p(), draws[0].beta.len()));
    }
    let n = dataset.data.n();
    let fitted_mean = DVector::zeros(n);
    let sample = PosteriorSample {
        method: summary.method,
        base_seed: summary.base_seed,
        stream_id: summary.stream_id,
        chain: summary.chain,
        draws,
        zeta_draws,
        fitted_mean,
        weight_trace: Vec::<WeightReport>::new(),
        degenerate_sweeps: summary.degenerate_sweeps,
        degenerate_after_burn_in: summary.degenerate_after_burn_in,
        shrink_gamma: summary.shrink_gamma,
    };
    Ok((sample, dataset, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{run_study, SimulationDesign};

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn draws_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_fn(4, 3, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0) - 1e-17 * i as f64);
        let p = dir.path().join("d.csv");
        write_draws(&p, &m).unwrap();
        let back = read_draws(&p).unwrap();
        assert_eq!(back.matrix(), &m);
        assert!(fs::read_to_string(&p).unwrap().starts_with("unit_1,unit_2,unit_3\n"));
    }

    #[test]
    fn real_data_shape_parses() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_fn(100, 452, |i, j| 9.0 + ((i * 452 + j) % 17) as f64 / 10.0);
        let p = dir.path().join("d.csv");
        write_draws(&p, &m).unwrap();
        let d = read_draws(&p).unwrap();
        assert_eq!((d.n_draws(), d.n_units()), (100, 452));
    }

    #[test]
    fn ragged_and_bad_cells_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "r.csv", "unit_1,unit_2\n1,2\n3,4\n5\n");
        match read_draws(&p) {
            Err(Error::Parse(msg)) => assert!(msg.contains("row 4"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "n.csv", "unit_1,unit_2\n1,2\n3,NaN\n");
        match read_draws(&p) {
            Err(Error::Parse(msg)) => assert!(msg.contains("row 3") && msg.contains("unit_2"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "t.csv", "unit_2,unit_1\n1,2\n");
        assert!(matches!(read_draws(&p), Err(Error::Parse(_))));
        let p = write(dir.path(), "e.csv", "unit_1\n");
        assert!(matches!(read_draws(&p), Err(Error::Parse(_))));
        assert!(matches!(read_draws(&dir.path().join("missing.csv")), Err(Error::Io(_))));
    }

    #[test]
    fn dataset_columns_and_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let d = write(dir.path(), "y.csv", "income,y,z\n1,2.5,0.1\n2,3.5,0.2\n3,4.5,0.3\n");
        let c = write(dir.path(), "x.csv", "metro\n0\n1\n1\n");
        let f = read_dataset(&d, Some(&c), false).unwrap();
        assert_eq!(f.covariate_names, vec!["income", "metro"]);
        assert_eq!(f.data.y().as_slice(), &[2.5, 3.5, 4.5]);
        assert_eq!(f.z.as_ref().unwrap().as_slice(), &[0.1, 0.2, 0.3]);
        assert_eq!(f.data.covariates()[(2, 1)], 1.0);

        let short = write(dir.path(), "s.csv", "metro\n0\n1\n");
        assert!(matches!(read_dataset(&d, Some(&short), false), Err(Error::DimensionMismatch(_))));
        let noy = write(dir.path(), "noy.csv", "x\n1\n");
        assert!(matches!(read_dataset(&noy, None, false), Err(Error::Parse(_))));

        let out = dir.path().join("out.csv");
        write_dataset(&out, &f.data, f.z.as_ref(), &f.covariate_names).unwrap();
        let back = read_dataset(&out, None, false).unwrap();
        assert_eq!(back.data, f.data);
        assert_eq!(back.z, f.z);
        assert_eq!(back.covariate_names, f.covariate_names);
    }

    #[test]
    fn designs_load_by_name_or_file() {
        let dir = tempfile::tempdir().unwrap();
        let d = load_design("example2").unwrap();
        let p = dir.path().join("d.json");
        write_json(&p, &d).unwrap();
        assert_eq!(load_design(p.to_str().unwrap()).unwrap(), d);
        let wrapped = DesignFile {
            schema_version: SCHEMA_VERSION,
            design_hash: d.hash(),
            design: d.clone(),
        };
        write_json(&p, &wrapped).unwrap();
        assert_eq!(load_design(p.to_str().unwrap()).unwrap(), d);
        assert!(matches!(load_design("nope"), Err(Error::Config(_))));
        let bad = write(dir.path(), "bad.json", "{\"name\": 3}");
        assert!(matches!(load_design(bad.to_str().unwrap()), Err(Error::Config(_))));
    }

    #[test]
    fn run_config_defaults_and_round_trip() {
        let c = RunConfig::default();
        assert_eq!(c.ais_r, 500);
        assert_eq!(c.chain, ChainConfig::default());
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>("{\"sead\": 1}").is_err());
    }

    #[test]
    fn study_round_trips_and_counts_rows() {
        let design = SimulationDesign {
            n: 20,
            n_test: 10,
            reps: 2,
            draws: 40,
            is_pool: 50,
            ais_r: 30,
            methods: vec![MethodKind::OracleGibbs, MethodKind::PluginZ, MethodKind::Ais],
            chain: ChainConfig {
                total_sweeps: 300,
                burn_in: 100,
                thin: 1,
                store_zeta: false,
            },
            ..SimulationDesign::example1()
        };
        let result = run_study(&design, Some(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        persist_study(dir.path(), &result).unwrap();
        assert_eq!(read_study(dir.path()).unwrap(), result);
        let csv = fs::read_to_string(dir.path().join("replications.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 3 * 2);
        for name in ["result.json", "summary.json", "design.json"] {
            let v: serde_json::Value = read_json(&dir.path().join(name)).unwrap();
            assert_eq!(v["schema_version"], SCHEMA_VERSION, "{name}");
        }
        let traces = fs::read_to_string(dir.path().join("weight_traces.csv")).unwrap();
        assert_eq!(traces.lines().count(), 1 + 300);

        write_report(dir.path(), &result, ReportFormat::Json).unwrap();
        let r: Report = read_json(&dir.path().join("table1.json")).unwrap();
        assert_eq!(r.schema_version, SCHEMA_VERSION);
        assert_eq!(r.table1.len(), 3);
        write_report(dir.path(), &result, ReportFormat::Csv).unwrap();
        let t = fs::read_to_string(dir.path().join("table1.csv")).unwrap();
        assert!(t.starts_with("method,w2_theta_zeta,w2_sigma_eps_sq"));
    }

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let draws = vec![
            ParamDraw { beta0: 0.1, theta_zeta: 2.0, beta: vec![1.0, -2.5], sigma_eps_sq: 0.3, sigma_theta: 1000.0 },
            ParamDraw { beta0: -0.1, theta_zeta: 1.0 / 3.0, beta: vec![0.0, 7.0], sigma_eps_sq: 0.2, sigma_theta: 999.0 },
        ];
        let p = dir.path().join("s.csv");
        write_samples(&p, &draws, 2).unwrap();
        assert_eq!(read_samples(&p).unwrap(), draws);
    }
}
