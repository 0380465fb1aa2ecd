use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pdmix::builder::{build_problem, sieve_sweep, SieveKind, SweepMode};
use pdmix::data::{
    deduplicate, sample_covariance, support_from_data, support_grid_1d, DistinctDataset,
};
use pdmix::datasets;
use pdmix::density::{likelihood_matrix, ComponentFamily};
use pdmix::dual::{initial_dual_state, k_gradient_hessian, solve, SolverOptions};
use pdmix::em::{discrete_em_solve, EmStop};
use pdmix::par;
use pdmix::recovery::Weights;
use pdmix::synthetic::{generate_synthetic, SyntheticDesign};

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn simulated() -> (DistinctDataset, ComponentFamily) {
    let sample = generate_synthetic(&SyntheticDesign::default(), 0).unwrap();
    let data = deduplicate(&sample.data, 0.0).unwrap();
    let fam = ComponentFamily::normal(sample_covariance(&sample.data).unwrap().into_inner(), 0.2)
        .unwrap();
    (data, fam)
}

fn bench_matrix(c: &mut Criterion) {
    let (data, fam) = simulated();
    let sup = support_from_data(&data);
    let mut g = c.benchmark_group("likelihood_matrix");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |b| {
            b.iter(|| likelihood_matrix(&fam, &sup, &data).unwrap())
        });
    }
    g.finish();
}

fn bench_derivatives(c: &mut Criterion) {
    let (data, fam) = simulated();
    let problem = build_problem(&data, &fam, &support_from_data(&data)).unwrap();
    let state = initial_dual_state(&problem).unwrap();
    let mut g = c.benchmark_group("derivatives");
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(name, |b| {
            b.iter(|| k_gradient_hessian(&state, &problem).unwrap())
        });
    }
    g.finish();
}

fn bench_solvers(c: &mut Criterion) {
    let mort = deduplicate(&datasets::mortality(), 0.0).unwrap();
    let fine = build_problem(
        &mort,
        &ComponentFamily::Poisson,
        &support_grid_1d(0.0, 9.0, 0.01).unwrap(),
    )
    .unwrap();
    let (data, fam) = simulated();
    let sim = build_problem(&data, &fam, &support_from_data(&data)).unwrap();
    let mut g = c.benchmark_group("solve");
    g.sample_size(10);
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_with_input(BenchmarkId::new("pd_mortality", name), &fine, |b, p| {
            b.iter(|| solve(p, &SolverOptions::default()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("pd_simulated", name), &sim, |b, p| {
            b.iter(|| solve(p, &SolverOptions::default()).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("dem_simulated", name), &sim, |b, p| {
            b.iter(|| {
                discrete_em_solve(
                    p,
                    &Weights::uniform(p.m()),
                    EmStop::LoglikChange(1e-4),
                    100_000,
                    1e-6,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let raw = datasets::iris();
    let data = deduplicate(&raw, 0.0).unwrap();
    let fam = ComponentFamily::normal(sample_covariance(&raw).unwrap().into_inner(), 1.0).unwrap();
    let sup = support_from_data(&data);
    let deltas = [5.0, 2.0, 1.0, 0.5, 0.2];
    let mut g = c.benchmark_group("sieve_sweep");
    g.sample_size(10);
    for (name, on) in MODES {
        par::set_parallel(on);
        let mode = if on {
            SweepMode::ColdParallel
        } else {
            SweepMode::Cold
        };
        g.bench_function(name, |b| {
            b.iter(|| {
                sieve_sweep(
                    &data,
                    &fam,
                    &sup,
                    &deltas,
                    SieveKind::Delta,
                    &SolverOptions::default(),
                    mode,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(
    benches,
    bench_matrix,
    bench_derivatives,
    bench_solvers,
    bench_sweep
);
criterion_main!(benches);
