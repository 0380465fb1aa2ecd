use std::path::Path;
use std::process::Command;

use pdmix::builder::{algorithm1, build_problem, sieve_sweep, SieveKind, SweepMode};
use pdmix::cli::{self, read_report, read_trace, Algorithm, DataSource, RunConfig};
use pdmix::data::{deduplicate, sample_covariance, support_from_data, support_grid_1d, RawDataset};
use pdmix::datasets;
use pdmix::density::ComponentFamily;
use pdmix::dual::{solve, SolverOptions};
use pdmix::em::ContinuousEmOptions;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

const DELTAS: [f64; 5] = [5.0, 2.0, 1.0, 0.5, 0.2];

fn iris_sweep(mode: SweepMode) -> pdmix::builder::MixtureTree {
    let raw = datasets::iris();
    let data = deduplicate(&raw, 0.0).unwrap();
    let fam = ComponentFamily::normal(sample_covariance(&raw).unwrap().into_inner(), 1.0).unwrap();
    let sup = support_from_data(&data);
    sieve_sweep(
        &data,
        &fam,
        &sup,
        &DELTAS,
        SieveKind::Delta,
        &SolverOptions::default(),
        mode,
    )
    .unwrap()
}

#[test]
fn iris_tree_is_nested_in_delta() {
    let tree = iris_sweep(SweepMode::Warm);
    assert_eq!(tree.levels.len(), DELTAS.len());
    // ascending δ: fewer components and a lower loglikelihood
    for w in tree.levels.windows(2) {
        assert!(w[0].delta < w[1].delta);
        assert!(w[0].m_hat >= w[1].m_hat, "{} -> {}", w[0].m_hat, w[1].m_hat);
        assert!(w[0].loglik > w[1].loglik);
        assert!(w[0].converged);
    }
    assert_eq!(tree.levels.last().unwrap().m_hat, 1);
}

#[test]
fn warm_and_cold_sweeps_agree() {
    let warm = iris_sweep(SweepMode::Warm);
    for mode in [SweepMode::Cold, SweepMode::ColdParallel] {
        let cold = iris_sweep(mode);
        for (a, b) in warm.levels.iter().zip(&cold.levels) {
            assert_eq!(a.sieve, b.sieve);
            assert!(
                (a.loglik - b.loglik).abs() < 1e-4,
                "δ={}: {} vs {}",
                a.sieve,
                a.loglik,
                b.loglik
            );
        }
    }
}

#[test]
fn pruned_solver_agrees_with_plain_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let sup = support_grid_1d(0.0, 12.0, 0.25).unwrap();
    for _ in 0..20 {
        let n = rng.random_range(20..200);
        let rates = [rng.random_range(0.5..3.0), rng.random_range(4.0..9.0)];
        let counts: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let lam = rates[rng.random_range(0..2)];
                vec![Poisson::new(lam).unwrap().sample(&mut rng)]
            })
            .collect();
        let data = deduplicate(&RawDataset::from_rows(&counts).unwrap(), 0.0).unwrap();
        let problem = build_problem(&data, &ComponentFamily::Poisson, &sup).unwrap();
        let opts = SolverOptions {
            psi_tol: 1e-5,
            ..Default::default()
        };
        let plain = solve(&problem, &opts).unwrap();
        let pruned = solve(
            &problem,
            &SolverOptions {
                prune: true,
                ..opts
            },
        )
        .unwrap();
        assert!(plain.converged && pruned.converged);
        assert!(
            (plain.loglik - pruned.loglik).abs() < 1e-5,
            "{} vs {}",
            plain.loglik,
            pruned.loglik
        );
    }
}

#[test]
fn continuous_step_improves_on_fixed_support() {
    let data = deduplicate(&datasets::mortality(), 0.0).unwrap();
    let sup = support_grid_1d(0.0, 9.0, 1.0).unwrap();
    let fit = algorithm1(
        &data,
        &ComponentFamily::Poisson,
        &sup,
        &SolverOptions::default(),
        &ContinuousEmOptions::default(),
    )
    .unwrap();
    assert!(fit.continuous.loglik >= fit.pd.loglik);
    assert!((fit.continuous.loglik - -1989.9).abs() < 0.05);
}

fn pdmix(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pdmix"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn cli_writes_readable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdmix(
        &[
            "--data",
            "builtin:mortality",
            "--family",
            "poisson",
            "--support",
            "grid:0:9:1",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = read_report(&dir.path().join("report.json")).unwrap();
    assert!((report.loglik.unwrap() - -1990.0928).abs() < 5e-4);
    assert_eq!((report.n, report.d, report.m), (1096, 10, 10));
    let trace = read_trace(&dir.path().join("trace.csv")).unwrap();
    assert_eq!(
        trace.len(),
        report.iterations.joint + report.iterations.fixed
    );
    assert!(trace.iter().all(|r| r.lambda.unwrap() >= 0.0));
    let weight: f64 = report.weights.iter().map(|w| w.weight).sum();
    assert!((weight - 1.0).abs() < 1e-5);
    assert!(dir.path().join("cdf.csv").exists());

    // the report survives a JSON round trip
    let text = serde_json::to_string(&report).unwrap();
    let back: cli::RunReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back.loglik, report.loglik);
    assert_eq!(back.config.support, report.config.support);
}

#[test]
fn cli_sweep_writes_tree() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdmix(
        &[
            "--data",
            "builtin:iris",
            "--algorithm",
            "sweep",
            "--sieve",
            "5,1,0.2",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let report = read_report(&dir.path().join("report.json")).unwrap();
    let tree = report.tree.unwrap();
    assert_eq!(tree.len(), 3);
    assert!((tree[2].loglik - -629.1448).abs() < 5e-4);
    let text = std::fs::read_to_string(dir.path().join("tree.csv")).unwrap();
    assert!(text.starts_with("sieve,delta,m_hat,loglik,theta,weight"));
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // not converged
    let out = pdmix(&["--data", "builtin:iris", "--max-iter", "2"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    // input errors
    let out = pdmix(&["--data", "does-not-exist.csv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = pdmix(
        &["--data", "builtin:iris", "--support", "grid:1:2"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let out = pdmix(
        &["--data", "builtin:iris", "--family", "poisson"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cli_verify_against_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = pdmix(
        &[
            "--data",
            "builtin:mortality",
            "--family",
            "poisson",
            "--support",
            "grid:0:9:3",
            "--verify",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let v = read_report(&dir.path().join("report.json"))
        .unwrap()
        .verify
        .unwrap();
    assert!(v.pass && v.difference.abs() < 1e-6);
}

#[test]
fn library_run_matches_cli_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::new(DataSource::Builtin("iris".into()), Algorithm::Pd);
    config.delta = 5.0;
    config.out = dir.path().to_path_buf();
    let report = cli::run(&config).unwrap();
    assert!(report.converged);
    assert!((report.loglik.unwrap() - -629.1448).abs() < 5e-4);
    assert_eq!(report.m_hat, Some(1));
}
