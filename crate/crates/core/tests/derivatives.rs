mod common;

use common::{random_problem, rng};
use nalgebra::SymmetricEigen;
use pdmix::dual::{
    constraint_values, initial_dual_state, k_gradient_hessian, k_value, newton_step_monotone,
    solve, DualState, SolverOptions, StepMode,
};
use pdmix::oracle::{finite_diff, finite_diff_jacobian, relative_error};
use rand::Rng;
use rand_distr::StandardNormal;

const REL_TOL: f64 = 1e-5;

/// Random state near the explicit `γ = 1` solution.
fn random_state(r: &mut impl Rng, problem: &pdmix::problem::Problem) -> DualState {
    let z0 = initial_dual_state(problem).unwrap();
    let z: Vec<f64> = z0
        .z()
        .iter()
        .map(|z| z + 0.3 * r.sample::<f64, _>(StandardNormal))
        .collect();
    DualState::new(z, r.random_range(1.0..4.0)).unwrap()
}

fn as_point(s: &DualState) -> Vec<f64> {
    let mut x = s.z().to_vec();
    x.push(s.gamma());
    x
}

fn from_point(x: &[f64]) -> DualState {
    let (z, g) = x.split_at(x.len() - 1);
    DualState::new(z.to_vec(), g[0]).unwrap()
}

#[test]
fn analytic_derivatives_match_finite_differences() {
    let mut r = rng(2024);
    let mut worst_g: f64 = 0.0;
    let mut worst_h: f64 = 0.0;
    for _ in 0..100 {
        let m = r.random_range(1..=8);
        let d = r.random_range(1..=6);
        let problem = random_problem(&mut r, m, d);
        let state = random_state(&mut r, &problem);
        let x = as_point(&state);
        let steps: Vec<f64> = x.iter().map(|v| 1e-5 * v.abs().max(1.0)).collect();

        let (g, h) = k_gradient_hessian(&state, &problem).unwrap();
        let k = |y: &[f64]| k_value(&from_point(y), &problem).unwrap();
        let (g_fd, _) = finite_diff(k, &x, &steps).unwrap();
        let grad = |y: &[f64]| {
            k_gradient_hessian(&from_point(y), &problem)
                .unwrap()
                .0
                .as_slice()
                .to_vec()
        };
        let h_fd = finite_diff_jacobian(grad, &x, &steps).unwrap();

        let g_m = nalgebra::DMatrix::from_column_slice(g.len(), 1, g.as_slice());
        let g_fd_m = nalgebra::DMatrix::from_column_slice(g_fd.len(), 1, g_fd.as_slice());
        worst_g = worst_g.max(relative_error(&g_m, &g_fd_m));
        worst_h = worst_h.max(relative_error(&h, &h_fd));
    }
    assert!(worst_g < REL_TOL, "gradient relative error {worst_g:.3e}");
    assert!(worst_h < REL_TOL, "Hessian relative error {worst_h:.3e}");
}

/// `e^(γℓ)/γ` is jointly convex in `(γ, ℓ)` exactly when `γℓ ≤ 1`, so `K`
/// is concave wherever every `p_j^γ ≤ e`. Newton iterates may overshoot that
/// region; the semidefiniteness check applies inside it.
#[test]
fn hessian_is_nsd_and_k_monotone_along_joint_steps() {
    let mut r = rng(7);
    let opts = SolverOptions::default();
    let (mut inside, mut total) = (0, 0);
    for _ in 0..30 {
        let m = r.random_range(2..=8);
        let d = r.random_range(2..=6);
        let problem = random_problem(&mut r, m, d);
        let mut state = initial_dual_state(&problem).unwrap();
        for _ in 0..40 {
            total += 1;
            let p = constraint_values(&state, &problem).unwrap();
            let reach = p
                .iter()
                .map(|v| state.gamma() * v.ln())
                .fold(f64::NEG_INFINITY, f64::max);
            if reach <= 1.0 {
                inside += 1;
                let (_, h) = k_gradient_hessian(&state, &problem).unwrap();
                let scale = h.amax().max(1.0);
                let top = SymmetricEigen::new(h).eigenvalues.max();
                assert!(
                    top <= 1e-9 * scale,
                    "Hessian eigenvalue {top:.3e} at γ={}",
                    state.gamma()
                );
            }
            let step = newton_step_monotone(&state, &problem, &opts, StepMode::Joint).unwrap();
            assert!(step.k_new >= step.k_old - 1e-12 * step.k_old.abs().max(1.0));
            if step.stalled || state.gamma() > 1e6 {
                break;
            }
            state = step.state;
        }
    }
    assert!(
        inside * 2 > total,
        "only {inside} of {total} states in the concave region"
    );
}

#[test]
fn solver_traces_are_monotone_within_segments() {
    let mut r = rng(99);
    for _ in 0..30 {
        let m = r.random_range(2..=8);
        let d = r.random_range(2..=6);
        let problem = random_problem(&mut r, m, d);
        let out = solve(&problem, &SolverOptions::default()).unwrap();
        for w in out.trace.records.windows(2) {
            if w[0].segment == w[1].segment && w[0].phase == w[1].phase {
                assert!(
                    w[1].k >= w[0].k - 1e-10 * w[0].k.abs().max(1.0),
                    "K dropped from {} to {}",
                    w[0].k,
                    w[1].k
                );
            }
        }
    }
}
