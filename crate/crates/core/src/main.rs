use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pdmix::builder::{SieveKind, SweepMode};
use pdmix::cli::{
    self, Algorithm, Covariance, DataSource, Family, RunConfig, SupportSource, OUT_ENV,
};
use pdmix::dual::SolverOptions;
use pdmix::em::ContinuousEmOptions;
use pdmix::synthetic::{generate_synthetic, SyntheticDesign};
use pdmix::tables::{self, HarnessOptions};
use pdmix::{par, Error};

#[derive(Parser, Debug)]
#[command(
    name = "pdmix",
    version,
    about = "NPMLE of mixing distributions by the penalized dual method"
)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Recompute the comparison tables.
    Tables(TablesArgs),
    /// Write a simulated dataset as CSV.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 270)]
        n: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// CSV path, `builtin:iris|galaxy|mortality` or `synthetic:SEED`.
    #[arg(long)]
    data: Option<String>,
    /// First CSV line is a header.
    #[arg(long)]
    header: bool,
    /// Zero-based columns to use, comma separated.
    #[arg(long, value_delimiter = ',')]
    columns: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "normal")]
    family: Family,
    /// `data`, `grid:lo:hi:step`, `lattice:lo:hi:step` or `file:path`.
    #[arg(long, default_value = "data")]
    support: String,
    #[arg(long, value_enum, default_value = "pd")]
    algorithm: Algorithm,
    /// Covariance multiplier for the normal family.
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, value_enum, default_value = "sample")]
    covariance: Covariance,
    /// Sieve values for `--algorithm sweep`, comma separated.
    #[arg(long, value_delimiter = ',')]
    sieve: Vec<f64>,
    #[arg(long, value_enum, default_value = "delta")]
    sieve_kind: SieveKind,
    #[arg(long, value_enum, default_value = "warm")]
    sweep_mode: SweepMode,
    /// Max-norm radius used to merge neighbouring supports when counting
    /// tree components.
    #[arg(long, default_value_t = 0.0)]
    merge_radius: f64,
    /// Stop when the gradient-function maximum is at most this.
    #[arg(long)]
    psi_tol: Option<f64>,
    #[arg(long)]
    joint_tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Discrete EM: stop on a loglikelihood change below this instead of
    /// the gradient-function rule.
    #[arg(long)]
    em_tol: Option<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    em_max_iter: usize,
    #[arg(long)]
    cem_tol: Option<f64>,
    #[arg(long)]
    cem_max_iter: Option<usize>,
    #[arg(long)]
    active_threshold: Option<f64>,
    /// Observations within this max-norm distance are merged.
    #[arg(long, default_value_t = 0.0)]
    dedup_tol: f64,
    #[arg(long, env = OUT_ENV, default_value = cli::DEFAULT_OUT)]
    out: PathBuf,
    /// Check the fit against the brute-force oracle (m <= 4).
    #[arg(long)]
    verify: bool,
    /// Disable data parallelism.
    #[arg(long)]
    sequential: bool,
    /// Print the report as JSON on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct TablesArgs {
    /// Tables to compute, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1u8, 2, 3, 4])]
    table: Vec<u8>,
    #[arg(long, default_value_t = tables::REFERENCE_SEED)]
    seed: u64,
    /// Skip the continuous EM rows.
    #[arg(long)]
    skip_cem: bool,
    #[arg(long, default_value_t = 1_000_000)]
    em_max_iter: usize,
    #[arg(long, env = OUT_ENV, default_value = cli::DEFAULT_OUT)]
    out: PathBuf,
    #[arg(long)]
    sequential: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, Error> {
        let data: DataSource = match &self.data {
            Some(d) => d.parse()?,
            None => return Err(Error::InvalidArgument("--data is required".into())),
        };
        let support: SupportSource = self.support.parse()?;
        let mut solver = SolverOptions::default();
        if let Some(v) = self.psi_tol {
            solver.psi_tol = v;
        }
        if let Some(v) = self.joint_tol {
            solver.joint_tol = v;
        }
        if let Some(v) = self.max_iter {
            solver.max_iter = v;
        }
        if let Some(v) = self.active_threshold {
            solver.active_threshold = v;
        }
        let mut cem = ContinuousEmOptions::default();
        if let Some(v) = self.cem_tol {
            cem.tol = v;
        }
        if let Some(v) = self.cem_max_iter {
            cem.max_iter = v;
        }
        Ok(RunConfig {
            header: self.header,
            columns: self.columns.clone(),
            family: self.family,
            support,
            delta: self.delta,
            covariance: self.covariance,
            sieve: self.sieve.clone(),
            sieve_kind: self.sieve_kind,
            sweep_mode: self.sweep_mode,
            merge_radius: self.merge_radius,
            solver,
            em_tau: self.em_tol,
            em_max_iter: self.em_max_iter,
            cem,
            dedup_tol: self.dedup_tol,
            out: self.out.clone(),
            verify: self.verify,
            ..RunConfig::new(data, self.algorithm)
        })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.6}"))
}

fn run(args: &RunArgs) -> Result<bool, Error> {
    let config = args.config()?;
    let report = cli::run(&config)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!(
            "n={} d={} p={} m={} algorithm={:?}",
            report.n, report.d, report.p, report.m, config.algorithm
        );
        println!(
            "loglik={} loglik_continuous={} psi={} m_hat={} converged={}",
            fmt_opt(report.loglik),
            fmt_opt(report.loglik_continuous),
            report.psi.map_or("-".into(), |x| format!("{x:.3e}")),
            report.m_hat.map_or("-".into(), |x| x.to_string()),
            report.converged
        );
        if let Some(tree) = &report.tree {
            for l in tree {
                println!(
                    "  sieve={} m_hat={} components={} loglik={:.6} converged={}{}",
                    l.sieve,
                    l.m_hat,
                    l.components,
                    l.loglik,
                    l.converged,
                    l.error
                        .as_deref()
                        .map_or(String::new(), |e| format!(" error={e}"))
                );
            }
        }
        if let Some(v) = &report.verify {
            println!(
                "verify: method={} oracle={:.6} diff={:.2e} pass={}",
                v.method, v.oracle_loglik, v.difference, v.pass
            );
        }
        println!(
            "wrote {} to {}",
            report.files.join(", "),
            config.out.display()
        );
    }
    let verified = report.verify.as_ref().is_none_or(|v| v.pass);
    Ok(report.converged && verified)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let sequential = match &cli.command {
        Some(Command::Tables(t)) => t.sequential,
        _ => cli.run.sequential,
    };
    if sequential {
        par::set_parallel(false);
    }
    let result = match &cli.command {
        None => run(&cli.run),
        Some(Command::Tables(t)) => {
            let opts = HarnessOptions {
                tables: t.table.clone(),
                seed: t.seed,
                em_max_iter: t.em_max_iter,
                skip_cem: t.skip_cem,
                ..Default::default()
            };
            tables::run_harness(&opts).and_then(|rep| {
                print!("{}", tables::render(&rep));
                tables::write_report(&rep, &t.out)?;
                println!(
                    "wrote tables.csv, tables.json, tables.txt to {}",
                    t.out.display()
                );
                Ok(true)
            })
        }
        Some(Command::Synth { seed, n, out }) => {
            let design = SyntheticDesign {
                n: *n,
                ..Default::default()
            };
            generate_synthetic(&design, *seed).and_then(|s| {
                let mut buf = Vec::new();
                {
                    let mut w = csv::Writer::from_writer(&mut buf);
                    for row in s.data.rows() {
                        w.serialize(row)?;
                    }
                    w.flush()?;
                }
                match out {
                    Some(p) => std::fs::write(p, &buf)?,
                    None => print!("{}", String::from_utf8_lossy(&buf)),
                }
                Ok(true)
            })
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
