//! EM baselines: discrete EM over a fixed support set and continuous EM that
//! also moves the support points (and the common covariance).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{DistinctDataset, SupportSet};
use crate::density::{ComponentFamily, NormalFamily};
use crate::error::{invalid, Error, Result};
use crate::par;
use crate::problem::Problem;
use crate::recovery::{loglik_from_fit, MixingMeasure, Weights};

/// When to stop the discrete EM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum EmStop {
    /// `Ψ ≤ tol`.
    Psi(f64),
    /// `|l^(t) − l^(t−1)| ≤ tol`.
    LoglikChange(f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct EmRecord {
    pub iteration: usize,
    pub loglik: f64,
    pub psi: f64,
    pub active: usize,
}

#[derive(Debug, Clone)]
pub struct DiscreteEmOutcome {
    pub weights: Weights,
    pub loglik: f64,
    pub psi: f64,
    /// EM updates performed.
    pub iterations: usize,
    pub converged: bool,
    /// Record `t` describes `π^(t)`, starting from the initial weights.
    pub trace: Vec<EmRecord>,
}

/// Iterate the EM update from `pi0` until `stop` holds or `max_iter` updates
/// have been made. The stopping rule is checked before each update.
pub fn discrete_em_solve(
    problem: &Problem,
    pi0: &Weights,
    stop: EmStop,
    max_iter: usize,
    active_threshold: f64,
) -> Result<DiscreteEmOutcome> {
    if pi0.len() != problem.m() {
        return invalid("initial weights do not match the support set");
    }
    let tol = match stop {
        EmStop::Psi(t) | EmStop::LoglikChange(t) => t,
    };
    if !(tol > 0.0) {
        return invalid("EM tolerance must be positive");
    }
    let f = problem.matrix();
    let (m, d) = (problem.m(), problem.d());
    let n = problem.total();
    let mut pi = pi0.as_slice().to_vec();
    let mut trace = Vec::new();
    let mut prev: Option<f64> = None;
    let mut t = 0;
    loop {
        let g = f.transpose_mul(&pi);
        if let Some(index) = g.iter().position(|&v| v <= 0.0) {
            return Err(Error::ZeroFit { index });
        }
        let l = loglik_from_fit(&g, problem);
        let ratio: Vec<f64> = problem
            .counts()
            .iter()
            .zip(&g)
            .map(|(c, g)| c / g)
            .collect();
        // Σ_i n_i F[j][i] / g_i = D_j + n
        let s: Vec<f64> = par::map_indexed(m, m * d, |j| {
            f.row(j).iter().zip(&ratio).map(|(a, r)| a * r).sum()
        });
        let psi = s.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v - n));
        trace.push(EmRecord {
            iteration: t,
            loglik: l,
            psi,
            active: pi.iter().filter(|&&v| v > active_threshold).count(),
        });
        let converged = match stop {
            EmStop::Psi(tol) => psi <= tol,
            EmStop::LoglikChange(tol) => prev.is_some_and(|p| (l - p).abs() <= tol),
        };
        if converged || t >= max_iter {
            return Ok(DiscreteEmOutcome {
                weights: Weights::normalized(pi)?,
                loglik: l,
                psi,
                iterations: t,
                converged,
                trace,
            });
        }
        prev = Some(l);
        for (p, sj) in pi.iter_mut().zip(&s) {
            *p *= sj / n;
        }
        let sum: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= sum);
        t += 1;
    }
}

/// `Λ^(t) = |l* − l^(t)|`.
pub fn loglik_residual(logliks: &[f64], l_star: f64) -> Vec<f64> {
    logliks.iter().map(|l| (l_star - l).abs()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateEstimate {
    /// Least-squares slope of `ln Λ^(t)` against `t`.
    pub slope: f64,
    /// `exp(slope)`.
    pub rate: f64,
    /// Root-mean-square residual of the straight-line fit.
    pub residual_rms: f64,
    pub points: usize,
}

/// Fit `ln Λ` against the iteration index over the trailing `window`
/// positive entries of `lambdas`.
pub fn rate_estimate(lambdas: &[f64], window: usize) -> Result<RateEstimate> {
    let pts: Vec<(f64, f64)> = lambdas
        .iter()
        .enumerate()
        .filter(|(_, l)| **l > 0.0 && l.is_finite())
        .map(|(t, l)| (t as f64, l.ln()))
        .collect();
    let window = window.max(10);
    if pts.len() < 10 {
        return invalid(format!(
            "rate estimate needs at least 10 positive residuals, got {}",
            pts.len()
        ));
    }
    let pts = &pts[pts.len().saturating_sub(window)..];
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let rss: f64 = pts
        .iter()
        .map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2))
        .sum();
    Ok(RateEstimate {
        slope,
        rate: slope.exp(),
        residual_rms: (rss / k).sqrt(),
        points: pts.len(),
    })
}

#[derive(Debug, Clone)]
pub struct ContinuousFit {
    pub measure: MixingMeasure,
    /// Common covariance estimate; the fitted components are `N(μ_j, δΣ̂)`.
    pub sigma_hat: Option<DMatrix<f64>>,
    pub delta: Option<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `Σ̂` lost rank: the likelihood is heading to its unbounded regime.
    pub collapsed: bool,
    pub logliks: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContinuousEmOptions {
    /// Stop once the loglikelihood gain falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ContinuousEmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100_000,
        }
    }
}

/// Log densities `ln π_j + ln f_j(y_i)` (row `i`, column `j`) and the
/// per-observation log mixture density.
fn responsibilities(
    family: &ComponentFamily,
    data: &DistinctDataset,
    supports: &SupportSet,
    pi: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (m, d, p) = (supports.len(), data.len(), data.dim());
    let rows: Vec<Result<(Vec<f64>, f64)>> = par::map_indexed(d, m * d * p * p, |i| {
        let y = data.row(i);
        let mut logs = Vec::with_capacity(m);
        for j in 0..m {
            let lf = family.log_density(y, supports.row(j))?;
            logs.push(if pi[j] > 0.0 {
                pi[j].ln() + lf
            } else {
                f64::NEG_INFINITY
            });
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::ZeroFit { index: i });
        }
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let lg = max + sum.ln();
        let r = logs.iter().map(|l| (l - lg).exp()).collect();
        Ok((r, lg))
    });
    let mut resp = Vec::with_capacity(d);
    let mut lg = Vec::with_capacity(d);
    for row in rows {
        let (r, l) = row?;
        resp.push(r);
        lg.push(l);
    }
    Ok((resp, lg))
}

fn weighted_loglik(data: &DistinctDataset, lg: &[f64]) -> f64 {
    data.counts()
        .iter()
        .zip(lg)
        .map(|(&c, l)| c as f64 * l)
        .sum()
}

/// Continuous EM started from `init`. For the normal family the weights,
/// means and common covariance are updated with `δ` held fixed; for the
/// Poisson family the weights and rates.
pub fn continuous_em_solve(
    data: &DistinctDataset,
    family: &ComponentFamily,
    init: &MixingMeasure,
    opts: &ContinuousEmOptions,
) -> Result<ContinuousFit> {
    if !(opts.tol > 0.0) {
        return invalid("EM tolerance must be positive");
    }
    if init.supports().dim() != data.dim() {
        return invalid("support dimension does not match the data");
    }
    let (d, p) = (data.len(), data.dim());
    let m = init.supports().len();
    let counts = data.counts_f64();
    let n: f64 = counts.iter().sum();
    let mut family = family.clone();
    let mut supports = init.supports().clone();
    let mut pi = init.weights().as_slice().to_vec();

    let (mut resp, lg) = responsibilities(&family, data, &supports, &pi)?;
    let mut loglik = weighted_loglik(data, &lg);
    let mut logliks = vec![loglik];
    let mut collapsed = false;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        // M-step
        let mass: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|i| counts[i] * resp[i][j]).sum())
            .collect();
        let mut theta = supports
            .rows()
            .flat_map(|r| r.to_vec())
            .collect::<Vec<f64>>();
        for j in 0..m {
            pi[j] = mass[j] / n;
            if mass[j] > 0.0 {
                for k in 0..p {
                    theta[j * p + k] = (0..d)
                        .map(|i| counts[i] * resp[i][j] * data.row(i)[k])
                        .sum::<f64>()
                        / mass[j];
                }
            }
        }
        let next_family = match &family {
            ComponentFamily::Poisson => ComponentFamily::Poisson,
            ComponentFamily::Normal(nf) => {
                let delta = nf.delta();
                let mut cov = DMatrix::<f64>::zeros(p, p);
                for i in 0..d {
                    let y = data.row(i);
                    for j in 0..m {
                        let wgt = counts[i] * resp[i][j];
                        if wgt == 0.0 {
                            continue;
                        }
                        for a in 0..p {
                            let da = y[a] - theta[j * p + a];
                            for b in 0..=a {
                                cov[(a, b)] += wgt * da * (y[b] - theta[j * p + b]);
                            }
                        }
                    }
                }
                for a in 0..p {
                    for b in 0..a {
                        cov[(b, a)] = cov[(a, b)];
                    }
                }
                cov /= n * delta;
                let eig = cov.clone().symmetric_eigenvalues();
                let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
                if !(min > 1e-10 * cov.trace()) {
                    collapsed = true;
                    break;
                }
                match NormalFamily::new(cov, delta) {
                    Ok(f) => ComponentFamily::Normal(f),
                    Err(Error::NotPositiveDefinite) => {
                        collapsed = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        // coinciding supports are legal mid-EM, so skip the distinctness check
        let next_supports = SupportSet::new_unchecked(theta, p);
        let (r, lg) = responsibilities(&next_family, data, &next_supports, &pi)?;
        let next = weighted_loglik(data, &lg);
        iterations += 1;
        family = next_family;
        supports = next_supports;
        resp = r;
        let gain = next - loglik;
        loglik = next;
        logliks.push(loglik);
        if gain < opts.tol {
            converged = true;
            break;
        }
    }

    let (sigma_hat, delta) = match &family {
        ComponentFamily::Normal(nf) => (Some(nf.sigma().clone()), Some(nf.delta())),
        ComponentFamily::Poisson => (None, None),
    };
    let weights = Weights::normalized(pi)?;
    Ok(ContinuousFit {
        measure: MixingMeasure::new(supports, weights)?,
        sigma_hat,
        delta,
        loglik,
        iterations,
        converged,
        collapsed,
        logliks,
    })
}
