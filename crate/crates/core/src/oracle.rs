//! Slow, independent reference computations used to check the solvers:
//! direct primal maximization on small problems and finite differences.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::par;
use crate::problem::Problem;
use crate::recovery::Weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    Grid,
    ProjectedAscent,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSolution {
    pub weights: Weights,
    pub loglik: f64,
    pub method: OracleMethod,
    /// Loglikelihood gained by the polishing iterations after the grid.
    pub polish_gain: f64,
    /// The lattice was too coarse: polishing moved the loglikelihood by
    /// more than 1e-3.
    pub coarse: bool,
}

/// Plain double loop over the unscaled densities.
fn naive_loglik(pi: &[f64], problem: &Problem) -> f64 {
    let f = problem.matrix();
    let mut l = 0.0;
    for i in 0..problem.d() {
        let mut g = 0.0;
        for (j, p) in pi.iter().enumerate() {
            g += p * f.density(j, i);
        }
        l += problem.counts()[i] * g.ln();
    }
    l
}

fn multiplicative_ascent(pi: &mut [f64], problem: &Problem, iterations: usize) {
    let f = problem.matrix();
    let (m, d) = (problem.m(), problem.d());
    let n = problem.total();
    for _ in 0..iterations {
        let g: Vec<f64> = (0..d)
            .map(|i| (0..m).map(|j| pi[j] * f.get(j, i)).sum())
            .collect();
        let mut next = vec![0.0; m];
        for j in 0..m {
            let s: f64 = (0..d)
                .map(|i| problem.counts()[i] * f.get(j, i) / g[i])
                .sum();
            next[j] = pi[j] * s / n;
        }
        let sum: f64 = next.iter().sum();
        for (p, v) in pi.iter_mut().zip(next) {
            *p = v / sum;
        }
    }
}

/// All compositions of `resolution` into `m` non-negative parts, in
/// lexicographic order.
fn lattice(m: usize, resolution: usize) -> Vec<Vec<usize>> {
    fn rec(m: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() + 1 == m {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(m, left - k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(m, resolution, &mut Vec::with_capacity(m), &mut out);
    out
}

pub const GRID_MAX_SUPPORTS: usize = 4;
pub const POLISH_ITERATIONS: usize = 10_000;

/// Grid search over the simplex lattice with spacing `1/resolution`
/// (`m ≤ 4`), then multiplicative polishing. Ties go to the lowest lattice
/// index.
pub fn brute_force_primal(problem: &Problem, resolution: usize) -> Result<OracleSolution> {
    let m = problem.m();
    if m > GRID_MAX_SUPPORTS {
        return invalid(format!(
            "grid oracle supports m <= {GRID_MAX_SUPPORTS}, got {m}"
        ));
    }
    if resolution == 0 {
        return invalid("resolution must be positive");
    }
    let pts = lattice(m, resolution);
    let values = par::map_indexed(pts.len(), pts.len() * m * problem.d(), |k| {
        let pi: Vec<f64> = pts[k]
            .iter()
            .map(|&c| c as f64 / resolution as f64)
            .collect();
        naive_loglik(&pi, problem)
    });
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] || values[best].is_nan() {
            best = k;
        }
    }
    if !values[best].is_finite() {
        return Err(Error::Numerical(
            "no lattice point has a finite loglikelihood".into(),
        ));
    }
    // keep every coordinate strictly positive so polishing can move it
    let eps = 1e-3 / m as f64;
    let mut pi: Vec<f64> = pts[best]
        .iter()
        .map(|&c| (1.0 - 1e-3) * c as f64 / resolution as f64 + eps)
        .collect();
    multiplicative_ascent(&mut pi, problem, POLISH_ITERATIONS);
    let loglik = naive_loglik(&pi, problem);
    let polish_gain = loglik - values[best];
    Ok(OracleSolution {
        weights: Weights::normalized(pi)?,
        loglik,
        method: OracleMethod::Grid,
        polish_gain,
        coarse: polish_gain.abs() > 1e-3,
    })
}

/// Long run of multiplicative updates from the uniform start; any `m`.
pub fn projected_ascent(problem: &Problem, iterations: usize) -> Result<OracleSolution> {
    let m = problem.m();
    let mut pi = vec![1.0 / m as f64; m];
    let start = naive_loglik(&pi, problem);
    multiplicative_ascent(&mut pi, problem, iterations);
    let loglik = naive_loglik(&pi, problem);
    if !loglik.is_finite() {
        return Err(Error::Numerical(
            "oracle loglikelihood is not finite".into(),
        ));
    }
    Ok(OracleSolution {
        weights: Weights::normalized(pi)?,
        loglik,
        method: OracleMethod::ProjectedAscent,
        polish_gain: loglik - start,
        coarse: false,
    })
}

fn checked(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical("non-finite function value".into()))
    }
}

/// Central-difference gradient and (symmetrized) Hessian of `f` at `x`,
/// with a separate step per coordinate.
pub fn finite_diff<F>(f: F, x: &[f64], steps: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)>
where
    F: Fn(&[f64]) -> f64,
{
    let k = x.len();
    if steps.len() != k {
        return invalid("one step per coordinate required");
    }
    let at = |delta: &[(usize, f64)]| -> Result<f64> {
        let mut y = x.to_vec();
        for &(i, h) in delta {
            y[i] += h;
        }
        checked(f(&y))
    };
    let f0 = at(&[])?;
    let mut grad = DVector::zeros(k);
    let mut hess = DMatrix::zeros(k, k);
    for i in 0..k {
        let h = steps[i];
        let fp = at(&[(i, h)])?;
        let fm = at(&[(i, -h)])?;
        grad[i] = (fp - fm) / (2.0 * h);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in 0..i {
            let hj = steps[j];
            let v = (at(&[(i, h), (j, hj)])? - at(&[(i, h), (j, -hj)])? - at(&[(i, -h), (j, hj)])?
                + at(&[(i, -h), (j, -hj)])?)
                / (4.0 * h * hj);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok((grad, hess))
}

/// Central-difference Jacobian of a vector function, rows = outputs.
pub fn finite_diff_jacobian<F>(f: F, x: &[f64], steps: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let k = x.len();
    if steps.len() != k {
        return invalid("one step per coordinate required");
    }
    let mut cols = Vec::with_capacity(k);
    for i in 0..k {
        let mut y = x.to_vec();
        y[i] += steps[i];
        let fp = f(&y);
        y[i] = x[i] - steps[i];
        let fm = f(&y);
        if fp.len() != fm.len() || fp.iter().chain(&fm).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite function value".into()));
        }
        cols.push(
            fp.iter()
                .zip(&fm)
                .map(|(a, b)| (a - b) / (2.0 * steps[i]))
                .collect::<Vec<_>>(),
        );
    }
    let rows = cols.first().map_or(0, |c| c.len());
    Ok(DMatrix::from_fn(rows, k, |r, c| cols[c][r]))
}

/// `‖a − b‖_F / ‖b‖_F`, falling back to the absolute error when `b` is 0.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::LikelihoodMatrix;

    #[test]
    fn lattice_counts() {
        // C(n + m − 1, m − 1)
        assert_eq!(lattice(1, 7).len(), 1);
        assert_eq!(lattice(3, 4).len(), 15);
        assert_eq!(lattice(4, 10).len(), 286);
    }

    #[test]
    fn single_support_oracle() {
        let f = LikelihoodMatrix::from_rows(&[[0.4, 0.2]]).unwrap();
        let p = Problem::new(f, &[1, 2]).unwrap();
        let o = brute_force_primal(&p, 3).unwrap();
        assert_eq!(o.weights.as_slice(), &[1.0]);
        let want = 0.4f64.ln() + 2.0 * 0.2f64.ln();
        assert!((o.loglik - want).abs() < 1e-14);
    }

    #[test]
    fn refuses_large_grid() {
        let f = LikelihoodMatrix::from_rows(&[[1.0]; 5]).unwrap();
        let p = Problem::new(f, &[1]).unwrap();
        assert!(brute_force_primal(&p, 10).is_err());
    }

    #[test]
    fn quadratic_derivatives() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, -1.0, 3.0, 0.5, 0.0, 0.25, 1.0]);
        let x = [0.3, -1.2, 0.7];
        let q = |v: &[f64]| {
            let v = DVector::from_column_slice(v);
            (v.transpose() * &a * &v)[0]
        };
        let (g, h) = finite_diff(q, &x, &[1e-3; 3]).unwrap();
        let xv = DVector::from_column_slice(&x);
        let want_g = (&a + a.transpose()) * &xv;
        assert!((g - want_g).amax() < 1e-8);
        assert!((h - (&a + a.transpose())).amax() < 1e-8);
    }

    #[test]
    fn jacobian_of_linear_map() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0]);
        let f = |v: &[f64]| (&a * DVector::from_column_slice(v)).as_slice().to_vec();
        let j = finite_diff_jacobian(f, &[0.1, 0.2, 0.3], &[1e-4; 3]).unwrap();
        assert!(relative_error(&j, &a) < 1e-10);
    }
}
