//! Component densities and the `m × d` likelihood matrix.
//!
//! Densities are evaluated on the log scale. The assembled matrix stores each
//! column divided by its largest entry together with the log of that factor,
//! so high-dimensional normal densities that underflow in linear space stay
//! usable. Every solver in the crate works with the scaled entries; the
//! scaling cancels in mixture weights, gradient-function values and
//! residual checks, and is added back in log-likelihoods.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::{DistinctDataset, SupportSet};
use crate::error::{invalid, Error, Result};
use crate::par;

/// Multivariate normal with covariance `δΣ` shared by all components.
#[derive(Debug, Clone)]
pub struct NormalFamily {
    sigma: DMatrix<f64>,
    delta: f64,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl NormalFamily {
    pub fn new(sigma: DMatrix<f64>, delta: f64) -> Result<Self> {
        if !(delta > 0.0) || !delta.is_finite() {
            return invalid(format!("sieve parameter must be positive, got {delta}"));
        }
        if !sigma.is_square() || sigma.nrows() == 0 {
            return invalid("covariance must be a non-empty square matrix");
        }
        let scaled = &sigma * delta;
        let chol = Cholesky::new(scaled).ok_or(Error::NotPositiveDefinite)?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        if !log_det.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        let p = sigma.nrows() as f64;
        let log_norm = -0.5 * (p * (2.0 * PI).ln() + log_det);
        Ok(Self {
            sigma,
            delta,
            chol,
            log_norm,
        })
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// Same `Σ`, different sieve parameter.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        Self::new(self.sigma.clone(), delta)
    }

    pub fn log_density(&self, y: &[f64], mu: &[f64]) -> f64 {
        let diff = DVector::from_iterator(y.len(), y.iter().zip(mu).map(|(a, b)| a - b));
        // ‖L⁻¹(y−μ)‖² = (y−μ)ᵀ(δΣ)⁻¹(y−μ)
        let half = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * half.norm_squared()
    }
}

#[derive(Debug, Clone)]
pub enum ComponentFamily {
    Normal(NormalFamily),
    Poisson,
}

impl ComponentFamily {
    pub fn normal(sigma: DMatrix<f64>, delta: f64) -> Result<Self> {
        Ok(Self::Normal(NormalFamily::new(sigma, delta)?))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Normal(_) => "normal",
            Self::Poisson => "poisson",
        }
    }

    pub fn delta(&self) -> Option<f64> {
        match self {
            Self::Normal(f) => Some(f.delta()),
            Self::Poisson => None,
        }
    }

    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        match self {
            Self::Normal(f) => Ok(Self::Normal(f.with_delta(delta)?)),
            Self::Poisson => invalid("the Poisson family has no sieve parameter"),
        }
    }

    pub fn log_density(&self, y: &[f64], theta: &[f64]) -> Result<f64> {
        match self {
            Self::Normal(f) => {
                if y.len() != f.dim() || theta.len() != f.dim() {
                    return invalid("dimension does not match the covariance matrix");
                }
                Ok(f.log_density(y, theta))
            }
            Self::Poisson => {
                if y.len() != 1 || theta.len() != 1 {
                    return invalid("the Poisson family is univariate");
                }
                let k = y[0];
                if k < 0.0 || k.fract() != 0.0 {
                    return invalid(format!("Poisson observation must be a count, got {k}"));
                }
                poisson_log_density(k as u64, theta[0])
            }
        }
    }
}

/// `log N_p(y; μ, δΣ)`.
pub fn normal_log_density(y: &[f64], mu: &[f64], sigma: &DMatrix<f64>, delta: f64) -> Result<f64> {
    if y.len() != mu.len() || y.len() != sigma.nrows() {
        return invalid("dimension mismatch in normal density");
    }
    Ok(NormalFamily::new(sigma.clone(), delta)?.log_density(y, mu))
}

const LN_FACT_TABLE: usize = 256;

/// `ln(k!)`: summed logs below 256, Stirling series above.
pub fn ln_factorial(k: u64) -> f64 {
    static TABLE: std::sync::OnceLock<Vec<f64>> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = vec![0.0; LN_FACT_TABLE];
        for i in 1..LN_FACT_TABLE {
            t[i] = t[i - 1] + (i as f64).ln();
        }
        t
    });
    if (k as usize) < LN_FACT_TABLE {
        return table[k as usize];
    }
    let x = k as f64 + 1.0;
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // ln Γ(x), asymptotic series
    (x - 0.5) * x.ln() - x
        + 0.5 * (2.0 * PI).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 / 1680.0)))
}

/// `y ln θ − θ − ln y!`, with `0 · ln 0 = 0` so that `θ = 0` is the point
/// mass at zero.
pub fn poisson_log_density(y: u64, theta: f64) -> Result<f64> {
    if !(theta >= 0.0) || !theta.is_finite() {
        return invalid(format!("Poisson mean must be non-negative, got {theta}"));
    }
    if y == 0 {
        return Ok(-theta);
    }
    if theta == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(y as f64 * theta.ln() - theta - ln_factorial(y))
}

/// Component densities `F[j][i] = f_{θ_j}(y_i)`, stored as column-scaled
/// entries plus per-column log scale factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMatrix {
    m: usize,
    d: usize,
    scaled: Vec<f64>,
    log_scale: Vec<f64>,
}

impl LikelihoodMatrix {
    /// Entries given directly on the linear scale (no column scaling).
    pub fn from_raw(m: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if m == 0 || d == 0 || values.len() != m * d {
            return invalid(format!(
                "expected {m}x{d} = {} entries, got {}",
                m * d,
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return invalid("likelihood entries must be finite and non-negative");
        }
        let out = Self {
            m,
            d,
            scaled: values,
            log_scale: vec![0.0; d],
        };
        out.check_columns()?;
        Ok(out)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let values: Vec<f64> = rows.iter().flat_map(|r| r.as_ref().to_vec()).collect();
        if rows.iter().any(|r| r.as_ref().len() != d) {
            return invalid("ragged likelihood rows");
        }
        Self::from_raw(rows.len(), d, values)
    }

    /// Build from log densities (row-major `m × d`), shifting each column by
    /// its maximum.
    pub fn from_log_densities(m: usize, d: usize, logs: Vec<f64>) -> Result<Self> {
        if m == 0 || d == 0 || logs.len() != m * d {
            return invalid("log-density matrix has the wrong size");
        }
        if logs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numerical("log density is NaN or +inf".into()));
        }
        let mut log_scale = vec![f64::NEG_INFINITY; d];
        for row in logs.chunks_exact(d) {
            for (s, &v) in log_scale.iter_mut().zip(row) {
                *s = s.max(v);
            }
        }
        if let Some(index) = log_scale.iter().position(|s| *s == f64::NEG_INFINITY) {
            return Err(Error::ZeroColumn { index });
        }
        let scaled = logs
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(&log_scale).map(|(v, s)| (v - s).exp()))
            .collect();
        Ok(Self {
            m,
            d,
            scaled,
            log_scale,
        })
    }

    fn check_columns(&self) -> Result<()> {
        for i in 0..self.d {
            if (0..self.m).all(|j| self.scaled[j * self.d + i] == 0.0) {
                return Err(Error::ZeroColumn { index: i });
            }
        }
        Ok(())
    }

    /// Number of support points.
    pub fn nrows(&self) -> usize {
        self.m
    }

    /// Number of distinct observations.
    pub fn ncols(&self) -> usize {
        self.d
    }

    /// Scaled entry; equals the density divided by `exp(log_scale[i])`.
    #[inline]
    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.scaled[j * self.d + i]
    }

    /// The density itself, `f_{θ_j}(y_i)`.
    pub fn density(&self, j: usize, i: usize) -> f64 {
        (self.scaled[j * self.d + i].ln() + self.log_scale[i]).exp()
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        &self.scaled[j * self.d..(j + 1) * self.d]
    }

    pub fn log_scale(&self) -> &[f64] {
        &self.log_scale
    }

    /// Keep only the listed support rows. Columns keep their scale factors.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return invalid("cannot select zero rows");
        }
        let scaled = rows.iter().flat_map(|&j| self.row(j).to_vec()).collect();
        Ok(Self {
            m: rows.len(),
            d: self.d,
            scaled,
            log_scale: self.log_scale.clone(),
        })
    }

    /// `Fᵀ v` (length `d`) for an `m`-vector `v`.
    pub fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.m);
        let (m, d) = (self.m, self.d);
        par::map_indexed(d, m * d, |i| {
            let mut acc = 0.0;
            for (j, &vj) in v.iter().enumerate() {
                if vj != 0.0 {
                    acc += vj * self.scaled[j * d + i];
                }
            }
            acc
        })
    }

    /// `F u` (length `m`) for a `d`-vector `u`.
    pub fn mul(&self, u: &[f64]) -> Vec<f64> {
        debug_assert_eq!(u.len(), self.d);
        par::map_indexed(self.m, self.m * self.d, |j| {
            self.row(j).iter().zip(u).map(|(f, x)| f * x).sum()
        })
    }
}

/// Evaluate every component density at every distinct observation.
pub fn likelihood_matrix(
    family: &ComponentFamily,
    supports: &SupportSet,
    data: &DistinctDataset,
) -> Result<LikelihoodMatrix> {
    if supports.dim() != data.dim() {
        return invalid(format!(
            "support dimension {} does not match data dimension {}",
            supports.dim(),
            data.dim()
        ));
    }
    if let ComponentFamily::Normal(f) = family {
        if f.dim() != data.dim() {
            return invalid("covariance dimension does not match the data");
        }
    }
    let (m, d, p) = (supports.len(), data.len(), data.dim());
    let rows: Vec<Result<Vec<f64>>> = par::map_indexed(m, m * d * p * p, |j| {
        let theta = supports.row(j);
        data.rows().map(|y| family.log_density(y, theta)).collect()
    });
    let mut logs = Vec::with_capacity(m * d);
    for row in rows {
        logs.extend(row?);
    }
    LikelihoodMatrix::from_log_densities(m, d, logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{deduplicate, RawDataset};

    #[test]
    fn normal_at_mode() {
        let v = normal_log_density(&[0.3], &[0.3], &DMatrix::identity(1, 1), 1.0).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-14);
        let v =
            normal_log_density(&[1.0, 0.0], &[0.0, 0.0], &DMatrix::identity(2, 2), 1.0).unwrap();
        assert!((v - (-(2.0 * PI).ln() - 0.5)).abs() < 1e-14);
        assert!((v + 2.337_877_066_409_345).abs() < 1e-12);
    }

    #[test]
    fn normal_rejects_bad_covariance() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            NormalFamily::new(bad, 1.0),
            Err(Error::NotPositiveDefinite)
        ));
        assert!(NormalFamily::new(DMatrix::identity(2, 2), 0.0).is_err());
    }

    #[test]
    fn poisson_values() {
        assert_eq!(poisson_log_density(0, 0.0).unwrap(), 0.0);
        assert_eq!(poisson_log_density(3, 0.0).unwrap(), f64::NEG_INFINITY);
        let v = poisson_log_density(2, 1.0).unwrap();
        assert!((v - (-1.0 - 2f64.ln())).abs() < 1e-15);
        assert!(poisson_log_density(1, -0.5).is_err());
    }

    #[test]
    fn stirling_branch_is_continuous_with_table() {
        let summed: f64 = (1..=300u64).map(|k| (k as f64).ln()).sum();
        assert!((ln_factorial(300) - summed).abs() < 1e-9 * summed);
        let below: f64 = (1..=255u64).map(|k| (k as f64).ln()).sum();
        assert!((ln_factorial(255) - below).abs() < 1e-10);
    }

    #[test]
    fn small_poisson_matrices() {
        let one = DistinctDataset::new(RawDataset::from_rows(&[[0.0]]).unwrap(), vec![1]).unwrap();
        let s = SupportSet::from_rows(&[[1.0]]).unwrap();
        let f = likelihood_matrix(&ComponentFamily::Poisson, &s, &one).unwrap();
        assert!((f.density(0, 0) - (-1f64).exp()).abs() < 1e-15);

        let data =
            DistinctDataset::new(RawDataset::from_rows(&[[0.0], [1.0]]).unwrap(), vec![1, 1])
                .unwrap();
        let s = SupportSet::from_rows(&[[0.0], [1.0]]).unwrap();
        let f = likelihood_matrix(&ComponentFamily::Poisson, &s, &data).unwrap();
        let e = (-1f64).exp();
        let expect = [[1.0, 0.0], [e, e]];
        for j in 0..2 {
            for i in 0..2 {
                assert!((f.density(j, i) - expect[j][i]).abs() < 1e-15, "{j},{i}");
            }
        }
    }

    #[test]
    fn impossible_observation_is_reported() {
        let data =
            DistinctDataset::new(RawDataset::from_rows(&[[0.0], [2.0]]).unwrap(), vec![1, 1])
                .unwrap();
        let s = SupportSet::from_rows(&[[0.0]]).unwrap();
        assert!(matches!(
            likelihood_matrix(&ComponentFamily::Poisson, &s, &data),
            Err(Error::ZeroColumn { index: 1 })
        ));
        assert!(matches!(
            LikelihoodMatrix::from_rows(&[[1.0, 0.0]]),
            Err(Error::ZeroColumn { index: 1 })
        ));
    }

    #[test]
    fn assembly_is_deterministic_and_column_scaled() {
        let raw = RawDataset::from_rows(&[[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]]).unwrap();
        let data = deduplicate(&raw, 0.0).unwrap();
        let s = crate::data::support_from_data(&data);
        let fam = ComponentFamily::normal(DMatrix::identity(2, 2), 0.7).unwrap();
        let a = likelihood_matrix(&fam, &s, &data).unwrap();
        let b = likelihood_matrix(&fam, &s, &data).unwrap();
        assert_eq!(a, b);
        for i in 0..a.ncols() {
            let max = (0..a.nrows()).map(|j| a.get(j, i)).fold(0.0, f64::max);
            assert_eq!(max, 1.0);
        }
    }

    #[test]
    fn matrix_products() {
        let f = LikelihoodMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(f.transpose_mul(&[1.0, 1.0, 1.0]), vec![9.0, 12.0]);
        assert_eq!(f.mul(&[1.0, -1.0]), vec![-1.0, -1.0, -1.0]);
        let g = f.select_rows(&[2, 0]).unwrap();
        assert_eq!(g.row(0), &[5.0, 6.0]);
    }
}
