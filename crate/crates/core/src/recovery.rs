//! From the penalized dual solution back to mixing probabilities, plus the
//! gradient-function certificate of optimality.

use serde::Serialize;

use crate::data::SupportSet;
use crate::dual::{constraint_values, DualState};
use crate::error::{invalid, Error, Result};
use crate::par;
use crate::problem::Problem;

/// Tolerance on `Σ π_j = 1`.
pub const SIMPLEX_TOL: f64 = 1e-10;

/// Mixing probabilities on the unit simplex.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Weights(Vec<f64>);

impl Weights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("weights must be non-empty");
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("every weight must lie in [0, 1]");
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return invalid(format!("weights sum to {sum}, not 1"));
        }
        Ok(Self(values))
    }

    /// Divide non-negative values by their sum.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return invalid("weights must be finite and non-negative");
        }
        let sum: f64 = values.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Numerical("all weights are zero".into()));
        }
        values.iter_mut().for_each(|v| *v /= sum);
        Ok(Self(values))
    }

    /// Normalize weights given as logs (log-sum-exp).
    pub fn from_log(logs: &[f64]) -> Result<Self> {
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY || max.is_nan() {
            return Err(Error::Numerical("all weights are zero".into()));
        }
        Self::normalized(logs.iter().map(|l| (l - max).exp()).collect())
    }

    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Indices with weight above `threshold`.
    pub fn active(&self, threshold: f64) -> Vec<usize> {
        (0..self.0.len())
            .filter(|&j| self.0[j] > threshold)
            .collect()
    }

    pub fn count_active(&self, threshold: f64) -> usize {
        self.0.iter().filter(|&&v| v > threshold).count()
    }

    /// Scatter into a vector of length `m` using `index`; missing entries
    /// are exactly zero.
    pub fn scatter(&self, index: &[usize], m: usize) -> Self {
        let mut out = vec![0.0; m];
        for (&j, &v) in index.iter().zip(&self.0) {
            out[j] = v;
        }
        Self(out)
    }
}

/// A discrete mixing distribution `Q`: support vectors with weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMeasure {
    supports: SupportSet,
    weights: Weights,
}

impl MixingMeasure {
    pub fn new(supports: SupportSet, weights: Weights) -> Result<Self> {
        if supports.len() != weights.len() {
            return invalid(format!(
                "{} weights for {} support points",
                weights.len(),
                supports.len()
            ));
        }
        Ok(Self { supports, weights })
    }

    pub fn supports(&self) -> &SupportSet {
        &self.supports
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Keep supports with weight above `threshold`, renormalized.
    pub fn restrict_active(&self, threshold: f64) -> Result<Self> {
        let idx = self.weights.active(threshold);
        if idx.is_empty() {
            return invalid("no support point above the activity threshold");
        }
        let w = Weights::normalized(idx.iter().map(|&j| self.weights.0[j]).collect())?;
        Self::new(self.supports.select(&idx)?, w)
    }
}

/// Scaled fitted values `g_i = Σ_j π_j F[j][i]` (divide-by-column-scale
/// units, see [`crate::density::LikelihoodMatrix`]).
pub fn fitted_values(pi: &Weights, problem: &Problem) -> Vec<f64> {
    problem.matrix().transpose_mul(pi.as_slice())
}

/// `l(π) = Σ_i n_i ln g_Q(y_i)`. Returns `-∞` when an observed point has
/// zero fitted density.
pub fn mixture_loglik(pi: &Weights, problem: &Problem) -> f64 {
    let g = fitted_values(pi, problem);
    loglik_from_fit(&g, problem)
}

pub(crate) fn loglik_from_fit(g: &[f64], problem: &Problem) -> f64 {
    let mut acc = 0.0;
    for ((gi, ni), s) in g
        .iter()
        .zip(problem.counts())
        .zip(problem.matrix().log_scale())
    {
        if *gi <= 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += ni * (gi.ln() + s);
    }
    acc
}

fn checked_fit(pi: &Weights, problem: &Problem) -> Result<Vec<f64>> {
    if pi.len() != problem.m() {
        return invalid(format!(
            "{} weights for {} support points",
            pi.len(),
            problem.m()
        ));
    }
    let g = fitted_values(pi, problem);
    if let Some(index) = g.iter().position(|&v| v <= 0.0) {
        return Err(Error::ZeroFit { index });
    }
    Ok(g)
}

fn gradient_from_fit(g: &[f64], problem: &Problem) -> Vec<f64> {
    let f = problem.matrix();
    let ratio: Vec<f64> = problem.counts().iter().zip(g).map(|(n, g)| n / g).collect();
    let total = problem.total();
    par::map_indexed(f.nrows(), f.nrows() * f.ncols(), |j| {
        f.row(j).iter().zip(&ratio).map(|(a, r)| a * r).sum::<f64>() - total
    })
}

/// Directional derivatives `D_j = Σ_i n_i (F[j][i] / g_i − 1)` toward each
/// support point.
pub fn gradient_function(pi: &Weights, problem: &Problem) -> Result<Vec<f64>> {
    let g = checked_fit(pi, problem)?;
    Ok(gradient_from_fit(&g, problem))
}

/// `Ψ = max_j D_j`; zero or below certifies a maximum.
pub fn psi(pi: &Weights, problem: &Problem) -> Result<f64> {
    Ok(gradient_function(pi, problem)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Loglikelihood and `Ψ` from a single fitted-value pass.
pub fn loglik_and_psi(pi: &Weights, problem: &Problem) -> Result<(f64, f64)> {
    let g = checked_fit(pi, problem)?;
    let d = gradient_from_fit(&g, problem);
    Ok((
        loglik_from_fit(&g, problem),
        d.into_iter().fold(f64::NEG_INFINITY, f64::max),
    ))
}

/// One EM update `π'_j = π_j Σ_i (n_i/n) F[j][i] / g_i`.
pub fn em_step(pi: &Weights, problem: &Problem) -> Result<Weights> {
    let g = checked_fit(pi, problem)?;
    Ok(em_step_from_fit(pi, &g, problem))
}

pub(crate) fn em_step_from_fit(pi: &Weights, g: &[f64], problem: &Problem) -> Weights {
    let f = problem.matrix();
    let ratio: Vec<f64> = problem.freqs().iter().zip(g).map(|(q, g)| q / g).collect();
    let next: Vec<f64> = par::map_indexed(f.nrows(), f.nrows() * f.ncols(), |j| {
        let pj = pi.0[j];
        if pj == 0.0 {
            return 0.0;
        }
        pj * f.row(j).iter().zip(&ratio).map(|(a, r)| a * r).sum::<f64>()
    });
    let sum: f64 = next.iter().sum();
    Weights(next.into_iter().map(|v| (v / sum).min(1.0)).collect())
}

fn log_constraints(state: &DualState, problem: &Problem) -> Result<Vec<f64>> {
    Ok(constraint_values(state, problem)?
        .into_iter()
        .map(f64::ln)
        .collect())
}

/// Candidate estimator `π†_j ∝ p_j^(γ−1)`. Supports with `p_j = 0` get
/// weight zero.
pub fn candidate_pi(state: &DualState, problem: &Problem) -> Result<Weights> {
    let g1 = state.gamma() - 1.0;
    let logs: Vec<f64> = log_constraints(state, problem)?
        .into_iter()
        .map(|lp| if lp == f64::NEG_INFINITY { lp } else { g1 * lp })
        .collect();
    Weights::from_log(&logs)
}

/// Penalized dual estimator `π*_j = p_j^γ`, renormalized. Also returns the
/// mass `Σ_j p_j^γ` before renormalization.
pub fn pd_estimator(state: &DualState, problem: &Problem) -> Result<(Weights, f64)> {
    let gamma = state.gamma();
    let logs: Vec<f64> = log_constraints(state, problem)?
        .into_iter()
        .map(|lp| gamma * lp)
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights = Weights::from_log(&logs)?;
    let mass = max.exp() * logs.iter().map(|l| (l - max).exp()).sum::<f64>();
    Ok((weights, mass))
}

/// `℘_γ⁻¹ − 1 = Σ_k p_k^(γ−1) − 1`. When every `p_j ≤ 1` this bounds
/// `D_j(π†) / n` for all `j`.
pub fn gradient_bound(state: &DualState, problem: &Problem) -> Result<f64> {
    Ok(inverse_normalizer(state, problem)? - 1.0)
}

/// `℘_γ⁻¹ = Σ_k p_k^(γ−1)`.
pub fn inverse_normalizer(state: &DualState, problem: &Problem) -> Result<f64> {
    let g1 = state.gamma() - 1.0;
    Ok(log_constraints(state, problem)?
        .into_iter()
        .filter(|lp| *lp > f64::NEG_INFINITY)
        .map(|lp| (g1 * lp).exp())
        .sum())
}

/// Gradient function at the candidate estimator written through the dual
/// variables: `D_j(π†) = n (p_j ℘_γ⁻¹ − 1)`. Exact at a stationary point of
/// `K(·, γ)`.
pub fn candidate_gradient_dual(state: &DualState, problem: &Problem) -> Result<Vec<f64>> {
    let inv = inverse_normalizer(state, problem)?;
    let n = problem.total();
    Ok(constraint_values(state, problem)?
        .into_iter()
        .map(|p| n * (p * inv - 1.0))
        .collect())
}

/// Primal–dual consistency defect `max_i |w_i g_i − n_i/n|`.
pub fn residual_check(state: &DualState, pi: &Weights, problem: &Problem) -> Result<f64> {
    if state.z().len() != problem.d() {
        return invalid("dual state does not match the problem");
    }
    let g = fitted_values(pi, problem);
    Ok(state
        .z()
        .iter()
        .zip(&g)
        .zip(problem.freqs())
        .map(|((z, g), q)| (z.exp() * g - q).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Serialize)]
pub struct FitDiagnostics {
    /// `ln g_Q(y_i)`, unscaled.
    pub log_fit: Vec<f64>,
    pub loglik: f64,
    pub psi: f64,
    pub gradient_bound: f64,
    pub residual_check: f64,
}

pub fn diagnostics(state: &DualState, pi: &Weights, problem: &Problem) -> Result<FitDiagnostics> {
    let g = checked_fit(pi, problem)?;
    let d = gradient_from_fit(&g, problem);
    Ok(FitDiagnostics {
        log_fit: g
            .iter()
            .zip(problem.matrix().log_scale())
            .map(|(g, s)| g.ln() + s)
            .collect(),
        loglik: loglik_from_fit(&g, problem),
        psi: d.into_iter().fold(f64::NEG_INFINITY, f64::max),
        gradient_bound: gradient_bound(state, problem)?,
        residual_check: residual_check(state, pi, problem)?,
    })
}

/// Recover `π` by solving `Σ_j π_j F[j][i] = (n_i/n) / w_i` over the
/// supports whose constraints are tight (`p_j ≥ 1 − tight_tol`), in the
/// least-squares sense. Only sensible for small problems; negative
/// solutions are clipped before renormalization.
pub fn linear_system_pi(state: &DualState, problem: &Problem, tight_tol: f64) -> Result<Weights> {
    let p = constraint_values(state, problem)?;
    let tight: Vec<usize> = (0..p.len()).filter(|&j| p[j] >= 1.0 - tight_tol).collect();
    if tight.is_empty() {
        return Err(Error::Numerical("no tight constraints".into()));
    }
    let f = problem.matrix();
    let d = problem.d();
    let a = nalgebra::DMatrix::from_fn(d, tight.len(), |i, k| f.get(tight[k], i));
    let b = nalgebra::DVector::from_iterator(
        d,
        state
            .z()
            .iter()
            .zip(problem.freqs())
            .map(|(z, q)| q / z.exp()),
    );
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let mut pi = vec![0.0; problem.m()];
    for (k, &j) in tight.iter().enumerate() {
        pi[j] = sol[k].max(0.0);
    }
    Weights::normalized(pi)
}
