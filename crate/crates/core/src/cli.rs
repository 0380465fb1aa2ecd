//! Run configuration, pipeline dispatch, reports and output files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::builder::{self, cdf_of_q, MixtureTree, SieveKind, SweepMode};
use crate::data::{
    deduplicate, sample_covariance, support_from_data, support_grid_1d, support_lattice,
    DistinctDataset, RawDataset, SupportSet,
};
use crate::datasets;
use crate::density::ComponentFamily;
use crate::dual::{self, SolveOutcome, SolverOptions};
use crate::em::{self, ContinuousEmOptions, ContinuousFit, EmStop};
use crate::error::{invalid, Error, Result};
use crate::oracle::{self, OracleMethod, GRID_MAX_SUPPORTS};
use crate::problem::Problem;
use crate::recovery::{MixingMeasure, Weights};
use crate::synthetic::{generate_synthetic, SyntheticDesign};

/// Default output directory when neither `--out` nor the environment
/// variable is set.
pub const DEFAULT_OUT: &str = "pdmix-out";
pub const OUT_ENV: &str = "PDMIX_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Normal,
    Poisson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Penalized dual, fixed support.
    Pd,
    /// Penalized dual with inactive-constraint pruning.
    PdIc,
    /// Discrete EM, fixed support.
    Dem,
    /// Continuous EM started from the data points with uniform weights.
    Cem,
    /// Penalized dual, then continuous EM from its active supports.
    Algorithm1,
    /// Penalized dual at every sieve value.
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Covariance {
    /// Sample covariance of the data.
    Sample,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    File(PathBuf),
    Builtin(String),
    /// The default synthetic design drawn with this seed.
    Synthetic(u64),
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(name) = s.strip_prefix("builtin:") {
            datasets::by_name(name)?;
            return Ok(Self::Builtin(name.to_string()));
        }
        if let Some(seed) = s.strip_prefix("synthetic:") {
            let seed = seed
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad seed '{seed}'")))?;
            return Ok(Self::Synthetic(seed));
        }
        Ok(Self::File(PathBuf::from(s)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportSource {
    /// The distinct observations.
    Data,
    /// Evenly spaced 1-D grid.
    Grid { lo: f64, hi: f64, step: f64 },
    /// Every combination of an evenly spaced axis in each coordinate.
    Lattice { lo: f64, hi: f64, step: f64 },
    /// CSV of support vectors, no header.
    File(PathBuf),
}

fn parse_range(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return invalid(format!("expected lo:hi:step, got '{s}'"));
    }
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("'{t}' is not a number")))
    };
    Ok((num(parts[0])?, num(parts[1])?, num(parts[2])?))
}

impl FromStr for SupportSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "data" {
            return Ok(Self::Data);
        }
        if let Some(rest) = s.strip_prefix("grid:") {
            let (lo, hi, step) = parse_range(rest)?;
            return Ok(Self::Grid { lo, hi, step });
        }
        if let Some(rest) = s.strip_prefix("lattice:") {
            let (lo, hi, step) = parse_range(rest)?;
            return Ok(Self::Lattice { lo, hi, step });
        }
        if let Some(path) = s.strip_prefix("file:") {
            return Ok(Self::File(PathBuf::from(path)));
        }
        invalid(format!(
            "unknown support source '{s}' (expected data, grid:lo:hi:step, lattice:lo:hi:step or file:path)"
        ))
    }
}

impl fmt::Display for SupportSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Data => write!(f, "data"),
            Self::Grid { lo, hi, step } => write!(f, "grid:{lo}:{hi}:{step}"),
            Self::Lattice { lo, hi, step } => write!(f, "lattice:{lo}:{hi}:{step}"),
            Self::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub header: bool,
    /// Zero-based columns to keep.
    pub columns: Option<Vec<usize>>,
    pub family: Family,
    pub support: SupportSource,
    pub algorithm: Algorithm,
    pub delta: f64,
    pub covariance: Covariance,
    pub sieve: Vec<f64>,
    pub sieve_kind: SieveKind,
    pub sweep_mode: SweepMode,
    /// Merge radius for the component count of each tree level.
    pub merge_radius: f64,
    pub solver: SolverOptions,
    /// Discrete EM stops on `|Δl| ≤ τ` instead of `Ψ ≤ psi_tol` when set.
    pub em_tau: Option<f64>,
    pub em_max_iter: usize,
    pub cem: ContinuousEmOptions,
    pub dedup_tol: f64,
    pub out: PathBuf,
    pub verify: bool,
    pub verify_resolution: usize,
}

impl RunConfig {
    pub fn new(data: DataSource, algorithm: Algorithm) -> Self {
        Self {
            data,
            header: false,
            columns: None,
            family: Family::Normal,
            support: SupportSource::Data,
            algorithm,
            delta: 1.0,
            covariance: Covariance::Sample,
            sieve: Vec::new(),
            sieve_kind: SieveKind::Delta,
            sweep_mode: SweepMode::Warm,
            merge_radius: 0.0,
            solver: SolverOptions::default(),
            em_tau: None,
            em_max_iter: 1_000_000,
            cem: ContinuousEmOptions::default(),
            dedup_tol: 0.0,
            out: PathBuf::from(DEFAULT_OUT),
            verify: false,
            verify_resolution: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if !(self.delta > 0.0) {
            return invalid("delta must be positive");
        }
        if self.algorithm == Algorithm::Sweep {
            if self.sieve.is_empty() {
                return invalid("--algorithm sweep needs --sieve values");
            }
            if self.family == Family::Poisson {
                return invalid("sieve sweeps need the normal family");
            }
        }
        if self.em_tau.is_some_and(|t| !(t > 0.0)) {
            return invalid("EM tolerance must be positive");
        }
        if !(self.cem.tol > 0.0) {
            return invalid("continuous EM tolerance must be positive");
        }
        if !(self.dedup_tol >= 0.0) {
            return invalid("dedup tolerance must be non-negative");
        }
        if !(self.merge_radius >= 0.0) {
            return invalid("merge radius must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Iterations {
    pub joint: usize,
    pub fixed: usize,
    pub em: usize,
    pub continuous: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportWeight {
    pub theta: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub method: String,
    pub oracle_loglik: f64,
    pub loglik: f64,
    pub difference: f64,
    pub pass: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSummary {
    pub sieve: f64,
    pub delta: f64,
    pub m_hat: usize,
    pub components: usize,
    pub loglik: f64,
    pub psi: f64,
    pub iterations: usize,
    pub converged: bool,
    pub degenerate: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub n: u64,
    pub d: usize,
    pub p: usize,
    pub m: usize,
    /// Fixed-support loglikelihood `l(π̂)`.
    pub loglik: Option<f64>,
    /// Continuous-EM loglikelihood `l(Q̂; δΣ̂)`.
    pub loglik_continuous: Option<f64>,
    pub m_hat: Option<usize>,
    pub psi: Option<f64>,
    pub gamma: Option<f64>,
    pub raw_mass: Option<f64>,
    pub restarts: usize,
    pub iterations: Iterations,
    pub converged: bool,
    /// Reference loglikelihood for `Λ`.
    pub l_star: Option<f64>,
    pub final_lambda: Option<f64>,
    pub active_threshold: f64,
    /// Active supports of the reported fit.
    pub weights: Vec<SupportWeight>,
    pub sigma_hat: Option<Vec<Vec<f64>>>,
    pub collapsed: bool,
    pub tree: Option<Vec<LevelSummary>>,
    pub verify: Option<VerifyReport>,
    pub wall_time_secs: f64,
    pub files: Vec<String>,
}

/// One line of `trace.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// `A` joint Newton, `B` fixed-γ Newton, `EM` discrete EM, `C`
    /// continuous EM.
    pub phase: String,
    pub segment: usize,
    pub k: Option<f64>,
    pub loglik: f64,
    pub psi: Option<f64>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub active: Option<usize>,
}

/// One line of `tree.csv`: an active support of one sieve level.
#[derive(Debug, Clone, Serialize)]
pub struct TreeRow {
    pub sieve: f64,
    pub delta: f64,
    pub m_hat: usize,
    pub loglik: f64,
    pub theta: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CdfRow {
    pub theta: f64,
    pub cdf: f64,
}

/// Everything a run produces, before it is written out.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub trace: Vec<TraceRow>,
    pub tree: Option<MixtureTree>,
    pub cdf: Option<Vec<CdfRow>>,
}

pub fn load_raw(config: &RunConfig) -> Result<RawDataset> {
    let raw = match &config.data {
        DataSource::File(path) => RawDataset::from_csv_path(path, config.header)?,
        DataSource::Builtin(name) => datasets::by_name(name)?,
        DataSource::Synthetic(seed) => generate_synthetic(&SyntheticDesign::default(), *seed)?.data,
    };
    let raw = match &config.columns {
        Some(cols) => raw.select_columns(cols)?,
        None => raw,
    };
    if config.family == Family::Poisson {
        raw.check_counts()?;
    }
    Ok(raw)
}

pub fn build_family(config: &RunConfig, raw: &RawDataset) -> Result<ComponentFamily> {
    match config.family {
        Family::Poisson => {
            if raw.dim() != 1 {
                return invalid("the Poisson family needs univariate data");
            }
            Ok(ComponentFamily::Poisson)
        }
        Family::Normal => {
            let sigma = match config.covariance {
                Covariance::Sample => sample_covariance(raw)?.into_inner(),
                Covariance::Identity => DMatrix::identity(raw.dim(), raw.dim()),
            };
            ComponentFamily::normal(sigma, config.delta)
        }
    }
}

pub fn build_supports(source: &SupportSource, data: &DistinctDataset) -> Result<SupportSet> {
    match source {
        SupportSource::Data => Ok(support_from_data(data)),
        SupportSource::Grid { lo, hi, step } => {
            if data.dim() != 1 {
                return invalid("a 1-D grid needs univariate data; use lattice:lo:hi:step");
            }
            support_grid_1d(*lo, *hi, *step)
        }
        SupportSource::Lattice { lo, hi, step } => {
            let axis = support_grid_1d(*lo, *hi, *step)?;
            let axis: Vec<f64> = axis.rows().map(|r| r[0]).collect();
            support_lattice(&axis, data.dim())
        }
        SupportSource::File(path) => {
            let raw = RawDataset::from_csv_path(path, false)?;
            SupportSet::new(raw.values().to_vec(), raw.dim())
        }
    }
}

fn active_weights(supports: &SupportSet, w: &Weights, threshold: f64) -> Vec<SupportWeight> {
    w.active(threshold)
        .into_iter()
        .map(|j| SupportWeight {
            theta: supports.row(j).to_vec(),
            weight: w.as_slice()[j],
        })
        .collect()
}

/// High-accuracy reference loglikelihood for the `Λ` columns.
pub fn reference_loglik(problem: &Problem, opts: &SolverOptions) -> Result<f64> {
    let tight = SolverOptions {
        psi_tol: 1e-6,
        max_iter: opts.max_iter * 10,
        prune: false,
        ..opts.clone()
    };
    Ok(dual::solve(problem, &tight)?.loglik)
}

fn pd_rows(out: &SolveOutcome, l_star: Option<f64>) -> Vec<TraceRow> {
    out.trace
        .records
        .iter()
        .map(|r| TraceRow {
            iteration: r.iteration,
            phase: r.phase.label().to_string(),
            segment: r.segment,
            k: Some(r.k),
            loglik: r.loglik,
            psi: Some(r.psi),
            lambda: l_star.map(|l| (l - r.loglik).abs()),
            gamma: Some(r.gamma),
            active: Some(r.active),
        })
        .collect()
}

fn cem_rows(fit: &ContinuousFit, offset: usize) -> Vec<TraceRow> {
    fit.logliks
        .iter()
        .enumerate()
        .map(|(t, &l)| TraceRow {
            iteration: offset + t,
            phase: "C".into(),
            segment: 0,
            k: None,
            loglik: l,
            psi: None,
            lambda: Some((fit.loglik - l).abs()),
            gamma: None,
            active: None,
        })
        .collect()
}

fn verify(config: &RunConfig, problem: &Problem, loglik: f64) -> Result<VerifyReport> {
    if problem.m() > GRID_MAX_SUPPORTS {
        return Ok(VerifyReport {
            method: "none".into(),
            oracle_loglik: f64::NAN,
            loglik,
            difference: f64::NAN,
            pass: true,
            note: Some(format!(
                "skipped: the grid oracle needs m <= {GRID_MAX_SUPPORTS}, got {}",
                problem.m()
            )),
        });
    }
    let o = oracle::brute_force_primal(problem, config.verify_resolution)?;
    let diff = loglik - o.loglik;
    // the solver may trail the optimum by at most its certificate
    let pass = diff >= -config.solver.psi_tol - 1e-6 && diff <= 1e-6;
    Ok(VerifyReport {
        method: match o.method {
            OracleMethod::Grid => "grid".into(),
            OracleMethod::ProjectedAscent => "projected-ascent".into(),
        },
        oracle_loglik: o.loglik,
        loglik,
        difference: diff,
        pass,
        note: o
            .coarse
            .then(|| "lattice too coarse: polishing moved l by > 1e-3".into()),
    })
}

fn sigma_rows(m: &Option<DMatrix<f64>>) -> Option<Vec<Vec<f64>>> {
    m.as_ref().map(|s| {
        (0..s.nrows())
            .map(|r| (0..s.ncols()).map(|c| s[(r, c)]).collect())
            .collect()
    })
}

fn cdf_rows(measure: &MixingMeasure) -> Option<Vec<CdfRow>> {
    cdf_of_q(measure).ok().map(|c| {
        c.steps
            .into_iter()
            .map(|(theta, cdf)| CdfRow { theta, cdf })
            .collect()
    })
}

/// Execute the configured pipeline.
pub fn execute(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let started = Instant::now();
    let raw = load_raw(config)?;
    let data = deduplicate(&raw, config.dedup_tol)?;
    let family = build_family(config, &raw)?;
    let supports = build_supports(&config.support, &data)?;
    let opts = SolverOptions {
        prune: config.solver.prune || config.algorithm == Algorithm::PdIc,
        ..config.solver.clone()
    };
    let threshold = opts.active_threshold;

    let mut report = RunReport {
        config: config.clone(),
        n: data.total(),
        d: data.len(),
        p: data.dim(),
        m: supports.len(),
        loglik: None,
        loglik_continuous: None,
        m_hat: None,
        psi: None,
        gamma: None,
        raw_mass: None,
        restarts: 0,
        iterations: Iterations::default(),
        converged: false,
        l_star: None,
        final_lambda: None,
        active_threshold: threshold,
        weights: Vec::new(),
        sigma_hat: None,
        collapsed: false,
        tree: None,
        verify: None,
        wall_time_secs: 0.0,
        files: Vec::new(),
    };
    let mut trace = Vec::new();
    let mut tree = None;
    let mut cdf = None;

    match config.algorithm {
        Algorithm::Pd | Algorithm::PdIc => {
            let problem = builder::build_problem(&data, &family, &supports)?;
            let out = dual::solve(&problem, &opts)?;
            let l_star = reference_loglik(&problem, &opts)?.max(out.loglik);
            trace = pd_rows(&out, Some(l_star));
            report.loglik = Some(out.loglik);
            report.psi = Some(out.psi);
            report.gamma = Some(out.state.gamma());
            report.raw_mass = Some(out.raw_mass);
            report.restarts = out.restarts;
            report.iterations.joint = out.trace.count(dual::Phase::Joint);
            report.iterations.fixed = out.trace.count(dual::Phase::Fixed);
            report.converged = out.converged;
            report.l_star = Some(l_star);
            report.final_lambda = Some((l_star - out.loglik).abs());
            report.m_hat = Some(out.weights.count_active(threshold));
            report.weights = active_weights(&supports, &out.weights, threshold);
            cdf = cdf_rows(&MixingMeasure::new(supports.clone(), out.weights.clone())?);
            if config.verify {
                report.verify = Some(verify(config, &problem, out.loglik)?);
            }
        }
        Algorithm::Dem => {
            let problem = builder::build_problem(&data, &family, &supports)?;
            let stop = match config.em_tau {
                Some(tau) => EmStop::LoglikChange(tau),
                None => EmStop::Psi(opts.psi_tol),
            };
            let out = em::discrete_em_solve(
                &problem,
                &Weights::uniform(problem.m()),
                stop,
                config.em_max_iter,
                threshold,
            )?;
            let l_star = reference_loglik(&problem, &opts)?.max(out.loglik);
            trace = out
                .trace
                .iter()
                .map(|r| TraceRow {
                    iteration: r.iteration,
                    phase: "EM".into(),
                    segment: 0,
                    k: None,
                    loglik: r.loglik,
                    psi: Some(r.psi),
                    lambda: Some((l_star - r.loglik).abs()),
                    gamma: None,
                    active: Some(r.active),
                })
                .collect();
            report.loglik = Some(out.loglik);
            report.psi = Some(out.psi);
            report.iterations.em = out.iterations;
            report.converged = out.converged;
            report.l_star = Some(l_star);
            report.final_lambda = Some((l_star - out.loglik).abs());
            report.m_hat = Some(out.weights.count_active(threshold));
            report.weights = active_weights(&supports, &out.weights, threshold);
            cdf = cdf_rows(&MixingMeasure::new(supports.clone(), out.weights.clone())?);
            if config.verify {
                report.verify = Some(verify(config, &problem, out.loglik)?);
            }
        }
        Algorithm::Cem => {
            let init = MixingMeasure::new(supports.clone(), Weights::uniform(supports.len()))?;
            let fit = em::continuous_em_solve(&data, &family, &init, &config.cem)?;
            trace = cem_rows(&fit, 0);
            report.loglik_continuous = Some(fit.loglik);
            report.iterations.continuous = fit.iterations;
            report.converged = fit.converged && !fit.collapsed;
            report.collapsed = fit.collapsed;
            report.m_hat = Some(fit.measure.weights().count_active(threshold));
            report.weights =
                active_weights(fit.measure.supports(), fit.measure.weights(), threshold);
            report.sigma_hat = sigma_rows(&fit.sigma_hat);
            cdf = cdf_rows(&fit.measure);
        }
        Algorithm::Algorithm1 => {
            let fit = builder::algorithm1(&data, &family, &supports, &opts, &config.cem)?;
            let out = &fit.pd;
            trace = pd_rows(out, None);
            let next = trace.len() + 1;
            trace.extend(cem_rows(&fit.continuous, next));
            report.loglik = Some(out.loglik);
            report.loglik_continuous = Some(fit.continuous.loglik);
            report.psi = Some(out.psi);
            report.gamma = Some(out.state.gamma());
            report.raw_mass = Some(out.raw_mass);
            report.restarts = out.restarts;
            report.iterations.joint = out.trace.count(dual::Phase::Joint);
            report.iterations.fixed = out.trace.count(dual::Phase::Fixed);
            report.iterations.continuous = fit.continuous.iterations;
            report.converged =
                out.converged && fit.continuous.converged && !fit.continuous.collapsed;
            report.collapsed = fit.continuous.collapsed;
            let cw = fit.continuous.measure.weights();
            report.m_hat = Some(cw.count_active(threshold));
            report.weights = active_weights(fit.continuous.measure.supports(), cw, threshold);
            report.sigma_hat = sigma_rows(&fit.continuous.sigma_hat);
            cdf = cdf_rows(&fit.fixed);
        }
        Algorithm::Sweep => {
            let t = builder::sieve_sweep(
                &data,
                &family,
                &supports,
                &config.sieve,
                config.sieve_kind,
                &opts,
                config.sweep_mode,
            )?;
            report.converged = t.levels.iter().all(|l| l.converged || l.degenerate);
            report.tree = Some(
                t.levels
                    .iter()
                    .map(|l| LevelSummary {
                        sieve: l.sieve,
                        delta: l.delta,
                        m_hat: l.m_hat,
                        components: l.components(config.merge_radius),
                        loglik: l.loglik,
                        psi: l.psi,
                        iterations: l.iterations,
                        converged: l.converged,
                        degenerate: l.degenerate,
                        error: l.error.clone(),
                    })
                    .collect(),
            );
            tree = Some(t);
        }
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(RunOutput {
        report,
        trace,
        tree,
        cdf,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn tree_rows(tree: &MixtureTree) -> Vec<TreeRow> {
    tree.levels
        .iter()
        .flat_map(|l| {
            l.supports.iter().map(move |(theta, w)| TreeRow {
                sieve: l.sieve,
                delta: l.delta,
                m_hat: l.m_hat,
                loglik: l.loglik,
                theta: theta
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
                weight: *w,
            })
        })
        .collect()
}

/// Write `report.json`, `trace.csv` and, when present, `tree.csv` and
/// `cdf.csv` into `dir`. Returns the updated report.
pub fn write_outputs(output: &RunOutput, dir: &Path) -> Result<RunReport> {
    std::fs::create_dir_all(dir)?;
    let mut report = output.report.clone();
    let mut files = Vec::new();
    if !output.trace.is_empty() {
        write_csv(&dir.join("trace.csv"), &output.trace)?;
        files.push("trace.csv".to_string());
    }
    if let Some(t) = &output.tree {
        write_csv(&dir.join("tree.csv"), &tree_rows(t))?;
        files.push("tree.csv".to_string());
    }
    if let Some(c) = &output.cdf {
        write_csv(&dir.join("cdf.csv"), c)?;
        files.push("cdf.csv".to_string());
    }
    files.push("report.json".to_string());
    report.files = files;
    let f = std::fs::File::create(dir.join("report.json"))?;
    serde_json::to_writer_pretty(f, &report)?;
    Ok(report)
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let f = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(f)?)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Run and write everything to `config.out`.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    let output = execute(config)?;
    write_outputs(&output, &config.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sources() {
        assert_eq!(
            "grid:0:9:0.5".parse::<SupportSource>().unwrap(),
            SupportSource::Grid {
                lo: 0.0,
                hi: 9.0,
                step: 0.5
            }
        );
        assert_eq!(
            "data".parse::<SupportSource>().unwrap(),
            SupportSource::Data
        );
        assert!("grid:0:9".parse::<SupportSource>().is_err());
        assert!("bogus".parse::<SupportSource>().is_err());
        assert_eq!(
            "builtin:iris".parse::<DataSource>().unwrap(),
            DataSource::Builtin("iris".into())
        );
        assert!("builtin:nope".parse::<DataSource>().is_err());
        assert_eq!(
            "synthetic:4".parse::<DataSource>().unwrap(),
            DataSource::Synthetic(4)
        );
    }

    #[test]
    fn support_display_round_trip() {
        for s in ["data", "grid:0:9:1", "lattice:-7:7:2", "file:sup.csv"] {
            let src: SupportSource = s.parse().unwrap();
            assert_eq!(src.to_string(), s);
        }
    }

    #[test]
    fn sweep_requires_sieve() {
        let c = RunConfig::new(DataSource::Builtin("iris".into()), Algorithm::Sweep);
        assert!(c.validate().is_err());
    }

    #[test]
    fn poisson_rejects_fractional_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "1\n2.5\n").unwrap();
        let mut c = RunConfig::new(DataSource::File(path), Algorithm::Pd);
        c.family = Family::Poisson;
        assert!(matches!(load_raw(&c), Err(Error::Parse { .. })));
    }
}
