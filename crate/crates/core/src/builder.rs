//! Model building: the two-step fit (fixed-support NPMLE, then continuous
//! EM), sieve sweeps producing mixture-tree data, and CDF steps.

use serde::{Deserialize, Serialize};

use crate::data::{DistinctDataset, SupportSet};
use crate::density::{likelihood_matrix, ComponentFamily};
use crate::dual::{self, DualState, SolveOutcome, SolverOptions};
use crate::em::{continuous_em_solve, ContinuousEmOptions, ContinuousFit};
use crate::error::{invalid, Result};
use crate::par;
use crate::problem::Problem;
use crate::recovery::MixingMeasure;

/// Build the fixed-support problem for `family` on `supports`.
pub fn build_problem(
    data: &DistinctDataset,
    family: &ComponentFamily,
    supports: &SupportSet,
) -> Result<Problem> {
    let f = likelihood_matrix(family, supports, data)?;
    Problem::new(f, data.counts())
}

#[derive(Debug, Clone)]
pub struct TwoStepFit {
    /// Step 1: NPMLE over the fixed supports (all `m` weights).
    pub fixed: MixingMeasure,
    pub pd: SolveOutcome,
    /// Step 2: continuous EM seeded with the active part of Step 1.
    pub continuous: ContinuousFit,
}

/// Fixed-support penalized dual fit followed by continuous EM from its
/// active supports.
pub fn algorithm1(
    data: &DistinctDataset,
    family: &ComponentFamily,
    supports: &SupportSet,
    opts: &SolverOptions,
    cem: &ContinuousEmOptions,
) -> Result<TwoStepFit> {
    let problem = build_problem(data, family, supports)?;
    let pd = dual::solve(&problem, opts)?;
    let fixed = MixingMeasure::new(supports.clone(), pd.weights.clone())?;
    let seed = fixed.restrict_active(opts.active_threshold)?;
    let continuous = continuous_em_solve(data, family, &seed, cem)?;
    Ok(TwoStepFit {
        fixed,
        pd,
        continuous,
    })
}

/// What the sieve values mean for a normal family with base covariance `Σ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SieveKind {
    /// Components `N(θ, δΣ)`.
    Delta,
    /// Components `N(θ, σ²Σ)`.
    Sigma,
}

impl SieveKind {
    pub fn delta(self, value: f64) -> f64 {
        match self {
            SieveKind::Delta => value,
            SieveKind::Sigma => value * value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Sequential, each level starting from the previous level's residuals.
    Warm,
    /// Sequential, every level from its own explicit start.
    Cold,
    /// Cold-started levels solved concurrently.
    ColdParallel,
}

#[derive(Debug, Clone, Serialize)]
pub struct TreeLevel {
    pub sieve: f64,
    pub delta: f64,
    pub m_hat: usize,
    pub loglik: f64,
    pub psi: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Every observation became its own component.
    pub degenerate: bool,
    /// Active support vectors with their weights.
    pub supports: Vec<(Vec<f64>, f64)>,
    pub error: Option<String>,
}

impl TreeLevel {
    /// Number of groups of active supports linked by max-norm distance at
    /// most `radius` (single linkage). On a fine grid a component whose true
    /// location falls between two grid points shows up as an adjacent pair;
    /// a radius of about one grid step merges such pairs.
    pub fn components(&self, radius: f64) -> usize {
        let k = self.supports.len();
        let mut parent: Vec<usize> = (0..k).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for a in 0..k {
            for b in 0..a {
                let dist = self.supports[a]
                    .0
                    .iter()
                    .zip(&self.supports[b].0)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                if dist <= radius {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    parent[ra] = rb;
                }
            }
        }
        (0..k).filter(|&i| find(&mut parent, i) == i).count()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MixtureTree {
    pub kind: SieveKind,
    pub active_threshold: f64,
    /// Sorted by ascending sieve value.
    pub levels: Vec<TreeLevel>,
}

fn level_from(
    sieve: f64,
    delta: f64,
    supports: &SupportSet,
    d: usize,
    outcome: Result<SolveOutcome>,
    threshold: f64,
) -> (TreeLevel, Option<DualState>) {
    match outcome {
        Ok(out) => {
            let active = out.weights.active(threshold);
            let w = out.weights.as_slice();
            let total: f64 = active.iter().map(|&j| w[j]).sum();
            let list: Vec<(Vec<f64>, f64)> = active
                .iter()
                .map(|&j| (supports.row(j).to_vec(), w[j] / total))
                .collect();
            let level = TreeLevel {
                sieve,
                delta,
                m_hat: list.len(),
                loglik: out.loglik,
                psi: out.psi,
                iterations: out.iterations(),
                converged: out.converged,
                degenerate: list.len() >= d,
                supports: list,
                error: None,
            };
            (level, Some(out.state))
        }
        Err(e) => (
            TreeLevel {
                sieve,
                delta,
                m_hat: 0,
                loglik: f64::NAN,
                psi: f64::NAN,
                iterations: 0,
                converged: false,
                degenerate: false,
                supports: Vec::new(),
                error: Some(e.to_string()),
            },
            None,
        ),
    }
}

/// Residuals from another level (moved between the two column scalings),
/// rescaled so the largest constraint is one, with the penalty reset to one.
fn warm_state(prev: &DualState, prev_scale: &[f64], problem: &Problem) -> Result<DualState> {
    let z = prev
        .z()
        .iter()
        .zip(prev_scale)
        .zip(problem.matrix().log_scale())
        .map(|((z, a), b)| z - a + b)
        .collect();
    let start = DualState::new(z, 1.0)?;
    let pmax = dual::constraint_values(&start, problem)?
        .into_iter()
        .fold(0.0, f64::max);
    if !(pmax > 0.0) || !pmax.is_finite() {
        return dual::initial_dual_state(problem);
    }
    start.shifted(-pmax.ln())
}

/// Solve the fixed-support problem at every sieve value. Levels are
/// visited from the largest value down; descent stops after the first
/// degenerate level.
pub fn sieve_sweep(
    data: &DistinctDataset,
    template: &ComponentFamily,
    supports: &SupportSet,
    sieve: &[f64],
    kind: SieveKind,
    opts: &SolverOptions,
    mode: SweepMode,
) -> Result<MixtureTree> {
    if sieve.is_empty() {
        return invalid("no sieve values given");
    }
    if sieve.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return invalid("sieve values must be positive");
    }
    if matches!(template, ComponentFamily::Poisson) {
        return invalid("sieve sweeps need the normal family");
    }
    let mut values = sieve.to_vec();
    values.sort_by(|a, b| b.total_cmp(a));
    values.dedup();
    let d = data.len();
    type Warm = (DualState, Vec<f64>);
    let solve_level = |value: f64, warm: Option<&Warm>| -> Result<(SolveOutcome, Vec<f64>)> {
        let family = template.with_delta(kind.delta(value))?;
        let problem = build_problem(data, &family, supports)?;
        let out = match warm {
            Some((prev, scale)) => {
                dual::solve_from(&problem, warm_state(prev, scale, &problem)?, opts)?
            }
            None => dual::solve(&problem, opts)?,
        };
        Ok((out, problem.matrix().log_scale().to_vec()))
    };

    let mut levels = Vec::with_capacity(values.len());
    match mode {
        SweepMode::Warm | SweepMode::Cold => {
            let mut prev: Option<Warm> = None;
            for &v in &values {
                let warm = if mode == SweepMode::Warm {
                    prev.as_ref()
                } else {
                    None
                };
                let (out, scale) = match solve_level(v, warm) {
                    Ok((o, s)) => (Ok(o), Some(s)),
                    Err(e) => (Err(e), None),
                };
                let (level, state) =
                    level_from(v, kind.delta(v), supports, d, out, opts.active_threshold);
                if let (Some(st), Some(sc)) = (state, scale) {
                    prev = Some((st, sc));
                }
                let stop = level.degenerate;
                levels.push(level);
                if stop {
                    break;
                }
            }
        }
        SweepMode::ColdParallel => {
            let outs = par::map_indexed(values.len(), usize::MAX, |k| solve_level(values[k], None));
            for (&v, out) in values.iter().zip(outs) {
                let out = out.map(|(o, _)| o);
                let (level, _) =
                    level_from(v, kind.delta(v), supports, d, out, opts.active_threshold);
                let stop = level.degenerate;
                levels.push(level);
                if stop {
                    break;
                }
            }
        }
    }
    levels.reverse();
    Ok(MixtureTree {
        kind,
        active_threshold: opts.active_threshold,
        levels,
    })
}

/// Step function of a univariate mixing distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfSteps {
    /// `(θ, Q(θ))` at each support point with positive weight, ascending.
    pub steps: Vec<(f64, f64)>,
}

pub fn cdf_of_q(measure: &MixingMeasure) -> Result<CdfSteps> {
    if measure.supports().dim() != 1 {
        return invalid("a CDF needs univariate supports");
    }
    let w = measure.weights().as_slice();
    let mut pts: Vec<(f64, f64)> = measure
        .supports()
        .rows()
        .zip(w)
        .filter(|(_, &w)| w > 0.0)
        .map(|(r, &w)| (r[0], w))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = 0.0;
    let steps = pts
        .into_iter()
        .map(|(t, w)| {
            acc += w;
            (t, acc)
        })
        .collect();
    Ok(CdfSteps { steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{deduplicate, RawDataset};
    use crate::recovery::Weights;
    use nalgebra::DMatrix;

    #[test]
    fn cdf_hand_values() {
        let q = MixingMeasure::new(
            SupportSet::from_rows(&[[2.0], [1.0]]).unwrap(),
            Weights::new(vec![0.7, 0.3]).unwrap(),
        )
        .unwrap();
        let c = cdf_of_q(&q).unwrap();
        assert_eq!(c.steps[0], (1.0, 0.3));
        assert_eq!(c.steps[1].0, 2.0);
        assert!((c.steps[1].1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cdf_refuses_multivariate() {
        let q = MixingMeasure::new(
            SupportSet::from_rows(&[[0.0, 1.0]]).unwrap(),
            Weights::uniform(1),
        )
        .unwrap();
        assert!(cdf_of_q(&q).is_err());
    }

    #[test]
    fn single_level_matches_direct_solve() {
        let raw = RawDataset::from_rows(&[[0.1], [0.4], [2.0], [2.3], [5.0]]).unwrap();
        let data = deduplicate(&raw, 0.0).unwrap();
        let sup = crate::data::support_from_data(&data);
        let fam = ComponentFamily::normal(DMatrix::from_element(1, 1, 1.0), 1.0).unwrap();
        let opts = SolverOptions::default();
        let tree = sieve_sweep(
            &data,
            &fam,
            &sup,
            &[0.7],
            SieveKind::Sigma,
            &opts,
            SweepMode::Warm,
        )
        .unwrap();
        assert_eq!(tree.levels.len(), 1);
        let direct = dual::solve(
            &build_problem(&data, &fam.with_delta(0.49).unwrap(), &sup).unwrap(),
            &opts,
        )
        .unwrap();
        assert_eq!(tree.levels[0].loglik, direct.loglik);
        assert_eq!(tree.levels[0].m_hat, tree.levels[0].supports.len());
    }

    #[test]
    fn merged_components() {
        let level = TreeLevel {
            sieve: 1.0,
            delta: 1.0,
            m_hat: 4,
            loglik: 0.0,
            psi: 0.0,
            iterations: 0,
            converged: true,
            degenerate: false,
            supports: vec![
                (vec![1.0], 0.2),
                (vec![1.02], 0.2),
                (vec![3.0], 0.3),
                (vec![1.04], 0.3),
            ],
            error: None,
        };
        assert_eq!(level.components(0.0), 4);
        assert_eq!(level.components(0.021), 2);
        assert_eq!(level.components(10.0), 1);
    }

    #[test]
    fn poisson_has_no_sieve() {
        let raw = RawDataset::from_rows(&[[1.0], [2.0]]).unwrap();
        let data = deduplicate(&raw, 0.0).unwrap();
        let sup = crate::data::support_from_data(&data);
        let opts = SolverOptions::default();
        let r = sieve_sweep(
            &data,
            &ComponentFamily::Poisson,
            &sup,
            &[1.0],
            SieveKind::Delta,
            &opts,
            SweepMode::Cold,
        );
        assert!(r.is_err());
    }
}
