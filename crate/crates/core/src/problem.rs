use crate::density::LikelihoodMatrix;
use crate::error::{invalid, Result};

/// A fixed-support mixture problem: the likelihood matrix together with the
/// multiplicities of the distinct observations.
#[derive(Debug, Clone)]
pub struct Problem {
    f: LikelihoodMatrix,
    counts: Vec<f64>,
    freqs: Vec<f64>,
    total: f64,
}

impl Problem {
    pub fn new(f: LikelihoodMatrix, counts: &[u64]) -> Result<Self> {
        let counts: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        Self::with_weights(f, counts)
    }

    /// Counts may be any positive reals (used by tests with fractional
    /// multiplicities).
    pub fn with_weights(f: LikelihoodMatrix, counts: Vec<f64>) -> Result<Self> {
        if counts.len() != f.ncols() {
            return invalid(format!(
                "{} counts for a matrix with {} observations",
                counts.len(),
                f.ncols()
            ));
        }
        if counts.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return invalid("counts must be positive and finite");
        }
        let total: f64 = counts.iter().sum();
        let freqs = counts.iter().map(|c| c / total).collect();
        Ok(Self {
            f,
            counts,
            freqs,
            total,
        })
    }

    pub fn matrix(&self) -> &LikelihoodMatrix {
        &self.f
    }

    /// Number of support points.
    pub fn m(&self) -> usize {
        self.f.nrows()
    }

    /// Number of distinct observations.
    pub fn d(&self) -> usize {
        self.f.ncols()
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    /// `n_i / n`.
    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// `Σ n_i · log_scale_i`, the log-likelihood offset from column scaling.
    pub fn loglik_offset(&self) -> f64 {
        self.counts
            .iter()
            .zip(self.f.log_scale())
            .map(|(c, s)| c * s)
            .sum()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            f: self.f.select_rows(rows)?,
            counts: self.counts.clone(),
            freqs: self.freqs.clone(),
            total: self.total,
        })
    }
}
