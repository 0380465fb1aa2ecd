//! Penalized dual solver.
//!
//! Maximizes `K(z, γ) = Σ_i (n_i/n) z_i − (1/γ) Σ_j p_j^γ` with
//! `p_j = Σ_i e^{z_i} F[j][i]`, first jointly in `(z, γ)` and then in `z` at
//! fixed `γ`, by Newton steps with a monotone backtracking line search.
//! Internally `γ = e^η` with `η ≥ 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par;
use crate::problem::Problem;
use crate::recovery::{self, Weights};

#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    z: Vec<f64>,
    gamma: f64,
}

impl DualState {
    pub fn new(z: Vec<f64>, gamma: f64) -> Result<Self> {
        if z.is_empty() {
            return invalid("dual state needs at least one coordinate");
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite log residual".into()));
        }
        if !(gamma >= 1.0) || !gamma.is_finite() {
            return invalid(format!("penalty parameter must be >= 1, got {gamma}"));
        }
        Ok(Self { z, gamma })
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Residuals `w = exp(z)`.
    pub fn w(&self) -> Vec<f64> {
        self.z.iter().map(|z| z.exp()).collect()
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(self.z.clone(), gamma)
    }

    /// Shift every `z_i` by `c` (multiplies all `p_j` by `e^c`).
    pub fn shifted(&self, c: f64) -> Result<Self> {
        Self::new(self.z.iter().map(|z| z + c).collect(), self.gamma)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Joint phase stops once `|ΔK|` falls below this.
    pub joint_tol: f64,
    /// Fixed-γ phase stops once `Ψ(π*) ≤ psi_tol` (count scale).
    pub psi_tol: f64,
    /// Iteration cap per phase.
    pub max_iter: usize,
    pub step_shrink: f64,
    pub max_halvings: usize,
    /// Rows with `p_j^γ` below this are dropped when pruning is on.
    pub prune_threshold: f64,
    pub prune: bool,
    /// First and last rung of the Hessian ridge ladder, relative to the
    /// largest diagonal entry.
    pub ridge_floor: f64,
    pub ridge_max: f64,
    /// Joint phase also hands off once `γ` exceeds this.
    pub gamma_max: f64,
    /// Longest joint step in `ln γ`; longer Newton steps are shortened.
    pub max_log_gamma_step: f64,
    /// How many times the joint phase may be resumed with a tighter
    /// tolerance when the fixed phase cannot reach `psi_tol`.
    pub max_restarts: usize,
    /// Pruned rows may be re-admitted at most this many times.
    pub max_readmissions: usize,
    /// `|Σ_j p_j^γ − 1|` allowed at exit.
    pub mass_tol: f64,
    /// `π_j` above this counts as an active support.
    pub active_threshold: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            joint_tol: 1e-6,
            psi_tol: 0.005,
            max_iter: 500,
            step_shrink: 0.5,
            max_halvings: 60,
            prune_threshold: 1e-12,
            prune: false,
            ridge_floor: 1e-10,
            ridge_max: 1e-2,
            gamma_max: 1e10,
            max_log_gamma_step: std::f64::consts::LN_10,
            max_restarts: 3,
            max_readmissions: 20,
            mass_tol: 1e-4,
            active_threshold: 1e-6,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("joint_tol", self.joint_tol),
            ("psi_tol", self.psi_tol),
            ("prune_threshold", self.prune_threshold),
            ("ridge_floor", self.ridge_floor),
            ("ridge_max", self.ridge_max),
            ("active_threshold", self.active_threshold),
            ("mass_tol", self.mass_tol),
            ("max_log_gamma_step", self.max_log_gamma_step),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.step_shrink > 0.0 && self.step_shrink < 1.0) {
            return invalid("step_shrink must lie in (0, 1)");
        }
        if self.max_iter == 0 {
            return invalid("max_iter must be at least 1");
        }
        if !(self.gamma_max >= 1.0) {
            return invalid("gamma_max must be at least 1");
        }
        if self.ridge_max < self.ridge_floor {
            return invalid("ridge_max must not be below ridge_floor");
        }
        Ok(())
    }
}

/// `p_j = Σ_i w_i F[j][i]`.
pub fn constraint_values(state: &DualState, problem: &Problem) -> Result<Vec<f64>> {
    if state.z.len() != problem.d() {
        return invalid(format!(
            "dual state has {} coordinates, problem has {} observations",
            state.z.len(),
            problem.d()
        ));
    }
    let p = problem.matrix().mul(&state.w());
    if let Some(j) = p.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("constraint {j} overflowed")));
    }
    Ok(p)
}

/// `p_j^e` with `0^e = 0`.
#[inline]
fn pow0(lp: f64, e: f64) -> f64 {
    if lp == f64::NEG_INFINITY {
        0.0
    } else {
        (e * lp).exp()
    }
}

fn k_from(state: &DualState, problem: &Problem, p: &[f64]) -> f64 {
    let g = state.gamma;
    let lin: f64 = state
        .z
        .iter()
        .zip(problem.freqs())
        .map(|(z, q)| z * q)
        .sum();
    let pen: f64 = p.iter().map(|&pj| pow0(pj.ln(), g)).sum();
    lin - pen / g
}

/// Penalized dual objective. `-∞` when a penalty term overflows.
pub fn k_value(state: &DualState, problem: &Problem) -> Result<f64> {
    let p = constraint_values(state, problem)?;
    Ok(k_from(state, problem, &p))
}

/// Gradient and Hessian of `K` in the coordinates `(z_1..z_d, γ)`.
pub fn k_gradient_hessian(
    state: &DualState,
    problem: &Problem,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = constraint_values(state, problem)?;
    Ok(derivatives(state, problem, &p))
}

fn derivatives(state: &DualState, problem: &Problem, p: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let f = problem.matrix();
    let (m, d) = (problem.m(), problem.d());
    let gamma = state.gamma;
    let w = state.w();
    let lp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let a: Vec<f64> = lp.iter().map(|&l| pow0(l, gamma - 1.0)).collect();
    // (γ−1) p^(γ−2), square-rooted for a symmetric Gram product
    let c: Vec<f64> = lp
        .iter()
        .map(|&l| ((gamma - 1.0) * pow0(l, gamma - 2.0)).sqrt())
        .collect();
    // p^(γ−1) ln p for the cross term
    let al: Vec<f64> = lp
        .iter()
        .zip(&a)
        .map(|(&l, &aj)| if aj == 0.0 { 0.0 } else { aj * l })
        .collect();
    let v = f.transpose_mul(&a);
    let u = f.transpose_mul(&al);

    let mut grad = DVector::zeros(d + 1);
    let mut hess = DMatrix::zeros(d + 1, d + 1);
    for i in 0..d {
        grad[i] = problem.freqs()[i] - w[i] * v[i];
        hess[(i, d)] = -w[i] * u[i];
        hess[(d, i)] = hess[(i, d)];
    }

    if gamma > 1.0 {
        // rows of G are w_i c_j F[j][i] over j
        let g_rows: Vec<Vec<f64>> = par::map_indexed(d, m * d, |i| {
            (0..m).map(|j| w[i] * c[j] * f.get(j, i)).collect()
        });
        let cols: Vec<Vec<f64>> = par::map_indexed(d, m * d * d / 2, |i| {
            (0..=i)
                .map(|k| g_rows[i].iter().zip(&g_rows[k]).map(|(x, y)| x * y).sum())
                .collect()
        });
        for (i, col) in cols.iter().enumerate() {
            for (k, &v) in col.iter().enumerate() {
                hess[(i, k)] = -v;
                hess[(k, i)] = -v;
            }
        }
    }
    for i in 0..d {
        hess[(i, i)] -= w[i] * v[i];
    }

    let (mut s, mut t, mut q) = (0.0, 0.0, 0.0);
    for &l in &lp {
        let e = pow0(l, gamma);
        if e > 0.0 {
            s += e;
            t += e * l;
            q += e * l * l;
        }
    }
    grad[d] = s / (gamma * gamma) - t / gamma;
    hess[(d, d)] = -2.0 * s / gamma.powi(3) + 2.0 * t / (gamma * gamma) - q / gamma;
    (grad, hess)
}

/// The explicit maximizer at `γ = 1`: `w_i = (n_i/n) / Σ_j F[j][i]`.
pub fn initial_dual_state(problem: &Problem) -> Result<DualState> {
    let sums = problem.matrix().transpose_mul(&vec![1.0; problem.m()]);
    if let Some(index) = sums.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::ZeroColumn { index });
    }
    let z = sums
        .iter()
        .zip(problem.freqs())
        .map(|(s, q)| (q / s).ln())
        .collect();
    DualState::new(z, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StepMode {
    Joint,
    FixedGamma,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub state: DualState,
    pub k_old: f64,
    pub k_new: f64,
    /// Max-norm of the gradient at the old state in the stepped coordinates.
    pub grad_norm: f64,
    pub halvings: usize,
    /// Ridge used (relative); negative when the scaled gradient was used.
    pub ridge: f64,
    /// No acceptable step was found; `state` is the old state.
    pub stalled: bool,
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, opts: &SolverOptions) -> (DVector<f64>, f64) {
    let n = a.nrows();
    let scale = (0..n)
        .map(|i| a[(i, i)].abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    let mut rho = 0.0;
    loop {
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += rho * scale;
        }
        if let Some(ch) = m.cholesky() {
            let x = ch.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return (x, rho);
            }
        }
        rho = if rho == 0.0 {
            opts.ridge_floor
        } else {
            rho * 10.0
        };
        if rho > opts.ridge_max {
            // steepest ascent, scaled by the diagonal
            let x = DVector::from_iterator(
                n,
                (0..n).map(|i| b[i] / a[(i, i)].abs().max(scale * opts.ridge_max)),
            );
            return (x, -1.0);
        }
    }
}

/// Relative size of a change in `K` indistinguishable from rounding.
const K_NOISE: f64 = 64.0 * f64::EPSILON;

/// `max_i |q_i − w_i Σ_j F[j][i] p_j^(γ−1)|`.
fn z_gradient_norm(state: &DualState, problem: &Problem, p: &[f64]) -> f64 {
    let a: Vec<f64> = p
        .iter()
        .map(|&pj| pow0(pj.ln(), state.gamma - 1.0))
        .collect();
    let v = problem.matrix().transpose_mul(&a);
    state
        .w()
        .iter()
        .zip(&v)
        .zip(problem.freqs())
        .map(|((w, v), q)| (q - w * v).abs())
        .fold(0.0, f64::max)
}

/// One monotone Newton step. At fixed `γ`, a full step that leaves `K`
/// unchanged up to rounding is accepted when it reduces the gradient.
pub fn newton_step_monotone(
    state: &DualState,
    problem: &Problem,
    opts: &SolverOptions,
    mode: StepMode,
) -> Result<StepResult> {
    let p = constraint_values(state, problem)?;
    let k_old = k_from(state, problem, &p);
    if !k_old.is_finite() {
        return Err(Error::Numerical(
            "K is not finite at the current state".into(),
        ));
    }
    let d = problem.d();
    let (g, h) = derivatives(state, problem, &p);
    let gamma = state.gamma;

    let (grad, neg_h) = match mode {
        StepMode::Joint => {
            // change of variable γ = e^η
            let mut grad = g.clone();
            grad[d] = gamma * g[d];
            let mut nh = -h.clone();
            for i in 0..d {
                nh[(i, d)] *= gamma;
                nh[(d, i)] *= gamma;
            }
            nh[(d, d)] = -(gamma * gamma * h[(d, d)] + gamma * g[d]);
            (grad, nh)
        }
        StepMode::FixedGamma => (
            g.rows(0, d).into_owned(),
            -h.view((0, 0), (d, d)).into_owned(),
        ),
    };
    let grad_norm = grad.amax();
    if grad.iter().any(|v| !v.is_finite()) || neg_h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite derivatives".into()));
    }
    let (dir, ridge) = solve_spd(&neg_h, &grad, opts);
    if dir.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite Newton direction".into()));
    }

    let eta = gamma.ln();
    let mut t: f64 = 1.0;
    if mode == StepMode::Joint && dir[d].abs() > opts.max_log_gamma_step {
        t = opts.max_log_gamma_step / dir[d].abs();
    }
    for halvings in 0..=opts.max_halvings {
        let z: Vec<f64> = state
            .z
            .iter()
            .enumerate()
            .map(|(i, z)| z + t * dir[i])
            .collect();
        let new_gamma = match mode {
            StepMode::Joint => (eta + t * dir[d]).max(0.0).exp(),
            StepMode::FixedGamma => gamma,
        };
        if z.iter().all(|v| v.is_finite()) && new_gamma.is_finite() {
            let cand = DualState {
                z,
                gamma: new_gamma,
            };
            let pc = problem.matrix().mul(&cand.w());
            if pc.iter().all(|v| v.is_finite()) {
                let k_new = k_from(&cand, problem, &pc);
                // once K is flat to rounding, a full Newton step is still
                // taken if it shrinks the gradient
                let flat = mode == StepMode::FixedGamma
                    && halvings == 0
                    && k_new.is_finite()
                    && k_old - k_new <= K_NOISE * k_old.abs().max(1.0)
                    && z_gradient_norm(&cand, problem, &pc) < grad_norm;
                if k_new.is_finite() && (k_new >= k_old || flat) {
                    return Ok(StepResult {
                        state: cand,
                        k_old,
                        k_new,
                        grad_norm,
                        halvings,
                        ridge,
                        stalled: false,
                    });
                }
            }
        }
        t *= opts.step_shrink;
    }
    // Rescue: the exact maximizer along z + c·1 is c = −ln(Σ p_j^γ)/γ. It
    // helps when the Hessian is negligible because every p_j^γ is tiny and
    // the Newton direction is too long to recover by halving.
    let mass: f64 = p.iter().map(|&pj| pow0(pj.ln(), gamma)).sum();
    let c = -mass.ln() / gamma;
    if c.is_finite() && c != 0.0 {
        let cand = state.shifted(c)?;
        let pc = problem.matrix().mul(&cand.w());
        let k_new = k_from(&cand, problem, &pc);
        if k_new.is_finite() && k_new > k_old {
            return Ok(StepResult {
                state: cand,
                k_old,
                k_new,
                grad_norm,
                halvings: opts.max_halvings,
                ridge,
                stalled: false,
            });
        }
    }
    Ok(StepResult {
        state: state.clone(),
        k_old,
        k_new: k_old,
        grad_norm,
        halvings: opts.max_halvings,
        ridge,
        stalled: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    #[serde(rename = "A")]
    Joint,
    #[serde(rename = "B")]
    Fixed,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Joint => "A",
            Phase::Fixed => "B",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub phase: Phase,
    /// Bumped whenever the objective changes (restart, pruning); `K` is
    /// monotone within a segment.
    pub segment: usize,
    pub k: f64,
    pub grad_norm: f64,
    pub gamma: f64,
    /// Rows still in the problem (all of them unless pruning).
    pub rows: usize,
    /// Supports with `π*_j` above the activity threshold.
    pub active: usize,
    pub loglik: f64,
    pub psi: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SolveTrace {
    pub records: Vec<TraceRecord>,
}

impl SolveTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn logliks(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loglik).collect()
    }

    /// `Λ^(t) = |l* − l(π^(t))|`.
    pub fn lambdas(&self, l_star: f64) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| (l_star - r.loglik).abs())
            .collect()
    }

    pub fn count(&self, phase: Phase) -> usize {
        self.records.iter().filter(|r| r.phase == phase).count()
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    /// Final dual state on the full set of observations.
    pub state: DualState,
    /// `π*` over all `m` original supports; pruned rows are exactly zero.
    pub weights: Weights,
    /// `Σ_j p_j^γ` before renormalization.
    pub raw_mass: f64,
    pub loglik: f64,
    pub psi: f64,
    pub trace: SolveTrace,
    pub converged: bool,
    pub stalled: bool,
    pub restarts: usize,
    /// Original indices of the rows in the final problem.
    pub kept_rows: Vec<usize>,
}

impl SolveOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

/// Rows of `problem` to drop: `γ ln p_j < ln(prune_threshold)`. At least one
/// row is always kept. Returns `(kept, dropped)` as positions in `problem`.
pub fn prune_inactive(
    state: &DualState,
    problem: &Problem,
    opts: &SolverOptions,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let p = constraint_values(state, problem)?;
    let cut = opts.prune_threshold.ln();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (j, &pj) in p.iter().enumerate() {
        if pj > 0.0 && state.gamma * pj.ln() >= cut {
            kept.push(j);
        } else {
            dropped.push(j);
        }
    }
    if kept.is_empty() {
        let best = p
            .iter()
            .enumerate()
            .fold(0, |b, (j, &v)| if v > p[b] { j } else { b });
        kept.push(best);
        dropped.retain(|&j| j != best);
    }
    Ok((kept, dropped))
}

/// Run the full solver from the `γ = 1` explicit solution.
pub fn solve(problem: &Problem, opts: &SolverOptions) -> Result<SolveOutcome> {
    let start = initial_dual_state(problem)?;
    solve_from(problem, start, opts)
}

struct Run<'a> {
    full: &'a Problem,
    opts: &'a SolverOptions,
    kept: Vec<usize>,
    reduced: Problem,
    trace: SolveTrace,
    segment: usize,
}

#[derive(Clone)]
struct Snapshot {
    weights: Weights,
    raw_mass: f64,
    loglik: f64,
    /// `Ψ` over every original support.
    psi: f64,
    /// `Ψ` over the rows still in the problem.
    psi_kept: f64,
    /// `D_j` over every original support.
    gradient: Option<Vec<f64>>,
}

impl Snapshot {
    fn done(&self, opts: &SolverOptions) -> bool {
        self.psi_kept <= opts.psi_tol && (self.raw_mass - 1.0).abs() <= opts.mass_tol
    }
}

impl Run<'_> {
    fn snapshot(&self, state: &DualState) -> Result<Snapshot> {
        let (w, raw_mass) = recovery::pd_estimator(state, &self.reduced)?;
        let weights = w.scatter(&self.kept, self.full.m());
        let gradient = match recovery::gradient_function(&weights, self.full) {
            Ok(d) => Some(d),
            Err(Error::ZeroFit { .. }) => None,
            Err(e) => return Err(e),
        };
        let (loglik, psi, psi_kept) = match &gradient {
            Some(d) => (
                recovery::mixture_loglik(&weights, self.full),
                d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                self.kept
                    .iter()
                    .map(|&j| d[j])
                    .fold(f64::NEG_INFINITY, f64::max),
            ),
            None => (f64::NEG_INFINITY, f64::INFINITY, f64::INFINITY),
        };
        Ok(Snapshot {
            weights,
            raw_mass,
            loglik,
            psi,
            psi_kept,
            gradient,
        })
    }

    fn record(&mut self, phase: Phase, step: &StepResult, snap: &Snapshot) {
        self.trace.records.push(TraceRecord {
            iteration: self.trace.records.len() + 1,
            phase,
            segment: self.segment,
            k: step.k_new,
            grad_norm: step.grad_norm,
            gamma: step.state.gamma,
            rows: self.kept.len(),
            active: snap.weights.count_active(self.opts.active_threshold),
            loglik: snap.loglik,
            psi: snap.psi,
            halvings: step.halvings,
        });
    }

    fn set_rows(&mut self, kept: Vec<usize>) -> Result<()> {
        self.reduced = self.full.select_rows(&kept)?;
        self.kept = kept;
        self.segment += 1;
        Ok(())
    }

    /// Drop rows whose `p_j^γ` is negligible.
    fn prune(&mut self, state: &DualState) -> Result<()> {
        let (keep_local, dropped) = prune_inactive(state, &self.reduced, self.opts)?;
        if !dropped.is_empty() {
            let kept = keep_local.iter().map(|&k| self.kept[k]).collect();
            self.set_rows(kept)?;
        }
        Ok(())
    }

    /// Re-admit dropped rows that violate the gradient inequality. The state
    /// is shifted back inside the feasible region if a re-admitted
    /// constraint exceeds one.
    fn readmit(&mut self, state: &mut DualState, snap: &Snapshot) -> Result<bool> {
        let Some(d) = &snap.gradient else {
            return Ok(false);
        };
        let mut kept = self.kept.clone();
        for (j, &dj) in d.iter().enumerate() {
            if dj > self.opts.psi_tol && self.kept.binary_search(&j).is_err() {
                kept.push(j);
            }
        }
        if kept.len() == self.kept.len() {
            return Ok(false);
        }
        kept.sort_unstable();
        self.set_rows(kept)?;
        let pmax = constraint_values(state, &self.reduced)?
            .into_iter()
            .fold(0.0, f64::max);
        if pmax > 1.0 {
            *state = state.shifted(-pmax.ln())?;
        }
        Ok(true)
    }
}

/// Run the solver from a given state (warm start).
pub fn solve_from(
    problem: &Problem,
    start: DualState,
    opts: &SolverOptions,
) -> Result<SolveOutcome> {
    opts.validate()?;
    if start.z.len() != problem.d() {
        return invalid("starting state does not match the problem");
    }
    let mut run = Run {
        full: problem,
        opts,
        kept: (0..problem.m()).collect(),
        reduced: problem.clone(),
        trace: SolveTrace::default(),
        segment: 0,
    };
    let mut state = start;
    if !k_value(&state, problem)?.is_finite() {
        return Err(Error::Numerical(
            "K is not finite at the starting state".into(),
        ));
    }
    let mut joint_tol = opts.joint_tol;
    let mut restarts = 0;
    let mut readmissions = 0;
    let stalled;
    let mut last: Option<Snapshot> = None;
    // best mass-feasible iterate, reported if the run ends unconverged
    let mut best: Option<(Snapshot, DualState)> = None;

    loop {
        // joint phase
        for _ in 0..opts.max_iter {
            let step = newton_step_monotone(&state, &run.reduced, opts, StepMode::Joint)?;
            let dk = (step.k_new - step.k_old).abs();
            state = step.state.clone();
            let snap = run.snapshot(&state)?;
            run.record(Phase::Joint, &step, &snap);
            last = Some(snap);
            if opts.prune {
                run.prune(&state)?;
            }
            if step.stalled || dk < joint_tol || state.gamma > opts.gamma_max {
                break;
            }
        }

        // fixed-γ phase
        let mut done = false;
        let mut phase_stalled = false;
        let mut prev_grad = f64::INFINITY;
        for _ in 0..opts.max_iter {
            let step = newton_step_monotone(&state, &run.reduced, opts, StepMode::FixedGamma)?;
            let dk = step.k_new - step.k_old;
            state = step.state.clone();
            let snap = run.snapshot(&state)?;
            run.record(Phase::Fixed, &step, &snap);
            done = snap.done(opts);
            if (snap.raw_mass - 1.0).abs() <= opts.mass_tol
                && best.as_ref().is_none_or(|(b, _)| snap.psi < b.psi)
            {
                best = Some((snap.clone(), state.clone()));
            }
            last = Some(snap);
            if done {
                break;
            }
            if opts.prune {
                run.prune(&state)?;
            }
            // no progress left at this γ: K is flat and the gradient has
            // stopped shrinking
            let flat = dk <= K_NOISE * step.k_old.abs().max(1.0);
            if step.stalled || (flat && step.grad_norm > 0.5 * prev_grad) {
                phase_stalled = true;
                break;
            }
            prev_grad = step.grad_norm;
        }
        if done && opts.prune && readmissions < opts.max_readmissions {
            let snap = last.as_ref().expect("at least one iteration ran");
            if run.readmit(&mut state, snap)? {
                readmissions += 1;
                continue;
            }
        }
        if done || restarts >= opts.max_restarts || state.gamma > opts.gamma_max {
            stalled = !done && phase_stalled;
            break;
        }
        restarts += 1;
        joint_tol /= 100.0;
        run.segment += 1;
    }

    let mut snap = last.expect("at least one iteration ran");
    if !snap.done(opts) {
        if let Some((b, st)) = best {
            if b.psi < snap.psi && !opts.prune {
                snap = b;
                state = st;
            }
        }
    }
    Ok(SolveOutcome {
        converged: snap.psi <= opts.psi_tol && (snap.raw_mass - 1.0).abs() <= opts.mass_tol,
        state,
        weights: snap.weights,
        raw_mass: snap.raw_mass,
        loglik: snap.loglik,
        psi: snap.psi,
        trace: run.trace,
        stalled,
        restarts,
        kept_rows: run.kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::LikelihoodMatrix;

    fn single() -> Problem {
        Problem::new(LikelihoodMatrix::from_rows(&[[1.0]]).unwrap(), &[5]).unwrap()
    }

    fn toy() -> Problem {
        let e = (-1f64).exp();
        let f = LikelihoodMatrix::from_rows(&[[1.0, 0.0], [e, e]]).unwrap();
        Problem::new(f, &[1, 1]).unwrap()
    }

    #[test]
    fn k_hand_values() {
        let p = single();
        let st = DualState::new(vec![0.0], 1.0).unwrap();
        assert!((k_value(&st, &p).unwrap() + 1.0).abs() < 1e-15);
        let st = DualState::new(vec![-1.0], 1.0).unwrap();
        let want = -1.0 - (-1f64).exp();
        assert!((k_value(&st, &p).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn constraint_hand_value() {
        let f = LikelihoodMatrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let p = Problem::new(f, &[1, 1]).unwrap();
        let st = DualState::new(vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(constraint_values(&st, &p).unwrap(), vec![1.0]);
    }

    #[test]
    fn initial_state_hand_values() {
        let f = LikelihoodMatrix::from_rows(&[[2.0]]).unwrap();
        let p = Problem::new(f, &[3]).unwrap();
        let st = initial_dual_state(&p).unwrap();
        assert!((st.w()[0] - 0.5).abs() < 1e-15);

        let st = initial_dual_state(&toy()).unwrap();
        let e = (-1f64).exp();
        let w = st.w();
        assert!((w[0] - 0.5 / (1.0 + e)).abs() < 1e-15);
        assert!((w[1] - 0.5 / e).abs() < 1e-14);
        let (g, _) = k_gradient_hessian(&st, &toy()).unwrap();
        assert!(g.rows(0, 2).amax() < 1e-12);
    }

    #[test]
    fn zero_row_is_pruned() {
        let f = LikelihoodMatrix::from_rows(&[[1.0, 0.5], [0.0, 0.0], [0.2, 1.0]]).unwrap();
        let p = Problem::new(f, &[2, 3]).unwrap();
        let st = initial_dual_state(&p).unwrap();
        let (kept, dropped) = prune_inactive(&st, &p, &SolverOptions::default()).unwrap();
        assert_eq!(kept, vec![0, 2]);
        assert_eq!(dropped, vec![1]);
    }

    #[test]
    fn fixed_step_at_stationary_point_is_null() {
        let p = toy();
        let st = initial_dual_state(&p).unwrap();
        let step =
            newton_step_monotone(&st, &p, &SolverOptions::default(), StepMode::FixedGamma).unwrap();
        for (a, b) in step.state.z().iter().zip(st.z()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn options_validation() {
        assert!(SolverOptions::default().validate().is_ok());
        let bad = SolverOptions {
            step_shrink: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SolverOptions {
            psi_tol: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn solves_toy_instance() {
        let p = toy();
        let out = solve(&p, &SolverOptions::default()).unwrap();
        assert!(out.converged);
        // l(π) = ln(1 − cπ₂) + ln π₂ − 1 with c = 1 − 1/e peaks at π₂ = 1/(2c)
        let c = 1.0 - (-1f64).exp();
        let pi2 = 0.5 / c;
        let want = (1.0 - c * pi2).ln() + pi2.ln() - 1.0;
        assert!((out.loglik - want).abs() < 1e-6);
        assert!((out.weights.as_slice()[1] - pi2).abs() < 1e-3);
    }
}
