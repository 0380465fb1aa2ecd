//! Observation matrices, distinct-row reduction, support sets and sample
//! statistics.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};

/// `n` observation vectors of common dimension `p`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    values: Vec<f64>,
    dim: usize,
}

impl RawDataset {
    pub fn new(values: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return invalid("observation dimension must be at least 1");
        }
        if values.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !values.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                row: values.len() / dim,
                expected: dim,
                found: values.len() % dim,
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: k / dim,
                col: k % dim,
            });
        }
        Ok(Self { values, dim })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyDataset)?;
        let dim = first.as_ref().len();
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    row: i,
                    expected: dim,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(values, dim)
    }

    /// Parse a CSV with one observation per row. Blank lines are skipped.
    pub fn from_csv_reader<R: Read>(reader: R, has_header: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(has_header)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut values = Vec::new();
        let mut dim = None;
        for (k, record) in rdr.records().enumerate() {
            let record = record?;
            let line = record
                .position()
                .map_or(k + 1 + has_header as usize, |p| p.line() as usize);
            if record.iter().all(|f| f.is_empty()) {
                continue;
            }
            let expected = *dim.get_or_insert(record.len());
            if record.len() != expected {
                return Err(Error::DimensionMismatch {
                    row: values.len() / expected,
                    expected,
                    found: record.len(),
                });
            }
            for field in record.iter() {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("`{field}` is not a decimal number"),
                })?;
                values.push(v);
            }
        }
        match dim {
            None => Err(Error::EmptyDataset),
            Some(dim) => Self::new(values, dim),
        }
    }

    pub fn from_csv_path(path: impl AsRef<Path>, has_header: bool) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file, has_header)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Keep only the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if cols.is_empty() {
            return invalid("no columns selected");
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= self.dim) {
            return invalid(format!(
                "column {c} out of range for dimension {}",
                self.dim
            ));
        }
        let values = self
            .rows()
            .flat_map(|r| cols.iter().map(move |&c| r[c]))
            .collect();
        Self::new(values, cols.len())
    }

    /// Count data must be non-negative integers.
    pub fn check_counts(&self) -> Result<()> {
        for (k, &v) in self.values.iter().enumerate() {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Parse {
                    line: k / self.dim + 1,
                    msg: format!("`{v}` is not a non-negative integer count"),
                });
            }
        }
        Ok(())
    }
}

/// Distinct observation vectors with multiplicities.
#[derive(Debug, Clone, PartialEq)]
pub struct DistinctDataset {
    y: Vec<f64>,
    dim: usize,
    counts: Vec<u64>,
    total: u64,
}

impl DistinctDataset {
    /// Build from already-distinct rows and their counts.
    pub fn new(rows: RawDataset, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != rows.len() {
            return invalid(format!(
                "{} counts supplied for {} rows",
                counts.len(),
                rows.len()
            ));
        }
        if counts.contains(&0) {
            return invalid("every count must be at least 1");
        }
        let total = counts.iter().sum();
        Ok(Self {
            dim: rows.dim,
            y: rows.values,
            counts,
            total,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.y[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.y.chunks_exact(self.dim)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// `n`, the number of original observations.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn counts_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    /// Empirical frequencies `n_i / n`.
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Undo the reduction: each row repeated by its count, in row order.
    pub fn expand(&self) -> RawDataset {
        let mut values = Vec::with_capacity(self.total as usize * self.dim);
        for (row, &c) in self.rows().zip(&self.counts) {
            for _ in 0..c {
                values.extend_from_slice(row);
            }
        }
        RawDataset {
            values,
            dim: self.dim,
        }
    }

    pub fn distinct_rows(&self) -> RawDataset {
        RawDataset {
            values: self.y.clone(),
            dim: self.dim,
        }
    }
}

fn bits_key(row: &[f64]) -> Vec<u64> {
    // -0.0 and 0.0 compare equal, so they must hash equal
    row.iter()
        .map(|&v| if v == 0.0 { 0 } else { v.to_bits() })
        .collect()
}

/// Merge rows that agree within `tol` in the max-norm. Rows keep the order
/// in which they first appear; each later row joins the first distinct row
/// it matches.
pub fn deduplicate(raw: &RawDataset, tol: f64) -> Result<DistinctDataset> {
    if !(tol >= 0.0) {
        return invalid("deduplication tolerance must be non-negative");
    }
    let dim = raw.dim();
    let mut y: Vec<f64> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    if tol == 0.0 {
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for row in raw.rows() {
            match seen.get(&bits_key(row)) {
                Some(&k) => counts[k] += 1,
                None => {
                    seen.insert(bits_key(row), counts.len());
                    y.extend_from_slice(row);
                    counts.push(1);
                }
            }
        }
    } else {
        for row in raw.rows() {
            let hit = y
                .chunks_exact(dim)
                .position(|d| d.iter().zip(row).all(|(a, b)| (a - b).abs() <= tol));
            match hit {
                Some(k) => counts[k] += 1,
                None => {
                    y.extend_from_slice(row);
                    counts.push(1);
                }
            }
        }
    }
    let total = counts.iter().sum();
    Ok(DistinctDataset {
        y,
        dim,
        counts,
        total,
    })
}

/// Candidate support vectors `θ_1, …, θ_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    theta: Vec<f64>,
    dim: usize,
}

impl SupportSet {
    /// Rows must be pairwise distinct.
    pub fn new(theta: Vec<f64>, dim: usize) -> Result<Self> {
        let raw = RawDataset::new(theta, dim)?;
        let distinct = deduplicate(&raw, 0.0)?;
        if distinct.len() != raw.len() {
            return invalid("support vectors must be pairwise distinct");
        }
        Ok(Self {
            theta: raw.values,
            dim,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let raw = RawDataset::from_rows(rows)?;
        Self::new(raw.values, raw.dim)
    }

    /// Free-moving locations (continuous EM) may coincide.
    pub(crate) fn new_unchecked(theta: Vec<f64>, dim: usize) -> Self {
        Self { theta, dim }
    }

    pub fn len(&self) -> usize {
        self.theta.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.theta[j * self.dim..(j + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.theta.chunks_exact(self.dim)
    }

    /// Sub-support made of the listed rows.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return invalid("cannot select an empty support set");
        }
        let theta = idx.iter().flat_map(|&j| self.row(j).to_vec()).collect();
        Self::new(theta, self.dim)
    }
}

/// The distinct observations themselves, so `m = d`.
pub fn support_from_data(data: &DistinctDataset) -> SupportSet {
    SupportSet {
        theta: data.y.clone(),
        dim: data.dim,
    }
}

/// Evenly spaced points from `lo` to `hi`, both endpoints included.
/// `m = round((hi - lo) / step) + 1`; the last point is pinned to `hi`.
pub fn support_grid_1d(lo: f64, hi: f64, step: f64) -> Result<SupportSet> {
    if !(step > 0.0) || !step.is_finite() {
        return invalid(format!("grid step must be positive, got {step}"));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return invalid(format!("grid needs lo < hi, got [{lo}, {hi}]"));
    }
    let intervals = ((hi - lo) / step).round() as usize;
    if intervals == 0 {
        return invalid("grid step exceeds the interval length");
    }
    let mut theta: Vec<f64> = (0..=intervals).map(|k| lo + k as f64 * step).collect();
    theta[intervals] = hi;
    Ok(SupportSet { theta, dim: 1 })
}

/// Cartesian lattice `axis^dim` in lexicographic order (last coordinate
/// fastest).
pub fn support_lattice(axis: &[f64], dim: usize) -> Result<SupportSet> {
    if axis.is_empty() || dim == 0 {
        return invalid("lattice needs at least one axis value and dimension >= 1");
    }
    let m = axis.len().pow(dim as u32);
    let mut theta = Vec::with_capacity(m * dim);
    for mut k in 0..m {
        let mut row = vec![0.0; dim];
        for c in (0..dim).rev() {
            row[c] = axis[k % axis.len()];
            k /= axis.len();
        }
        theta.extend(row);
    }
    SupportSet::new(theta, dim)
}

/// Unbiased (divisor `n - 1`) sample variance-covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCovariance(DMatrix<f64>);

impl SampleCovariance {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

pub fn sample_covariance(raw: &RawDataset) -> Result<SampleCovariance> {
    let n = raw.len();
    if n < 2 {
        return invalid("sample covariance needs at least two observations");
    }
    let p = raw.dim();
    let mut mean = vec![0.0; p];
    for row in raw.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut s = DMatrix::zeros(p, p);
    for row in raw.rows() {
        for a in 0..p {
            let da = row[a] - mean[a];
            for b in 0..=a {
                s[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    for a in 0..p {
        for b in 0..=a {
            let v = s[(a, b)] / (n - 1) as f64;
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
    }
    Ok(SampleCovariance(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedup_exact_keeps_first_appearance() {
        let raw = RawDataset::from_rows(&[[2.0], [2.0], [0.0], [2.0]]).unwrap();
        let d = deduplicate(&raw, 0.0).unwrap();
        assert_eq!(d.row(0), &[2.0]);
        assert_eq!(d.row(1), &[0.0]);
        assert_eq!(d.counts(), &[3, 1]);
        assert_eq!(d.total(), 4);
    }

    #[test]
    fn dedup_tolerance_merges_near_ties() {
        let raw = RawDataset::from_rows(&[[1.0, 1.0], [1.0 + 1e-9, 1.0], [1.1, 1.0]]).unwrap();
        assert_eq!(deduplicate(&raw, 0.0).unwrap().len(), 3);
        let d = deduplicate(&raw, 1e-6).unwrap();
        assert_eq!(d.counts(), &[2, 1]);
    }

    #[test]
    fn signed_zero_is_one_value() {
        let raw = RawDataset::from_rows(&[[0.0], [-0.0]]).unwrap();
        assert_eq!(deduplicate(&raw, 0.0).unwrap().len(), 1);
    }

    #[test]
    fn raw_validation_errors() {
        assert!(matches!(
            RawDataset::from_rows::<[f64; 1]>(&[]),
            Err(Error::EmptyDataset)
        ));
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(matches!(
            RawDataset::from_rows(&rows),
            Err(Error::DimensionMismatch { row: 1, .. })
        ));
        assert!(matches!(
            RawDataset::from_rows(&[[f64::NAN]]),
            Err(Error::NonFinite { row: 0, col: 0 })
        ));
        assert!(deduplicate(&RawDataset::from_rows(&[[1.0]]).unwrap(), -1.0).is_err());
    }

    #[test]
    fn csv_with_and_without_header() {
        let with = "a,b\n1,2\n3.5,4\n\n";
        let r = RawDataset::from_csv_reader(with.as_bytes(), true).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.row(1), &[3.5, 4.0]);
        let without = "1,2\n3.5,4\n";
        assert_eq!(
            RawDataset::from_csv_reader(without.as_bytes(), false).unwrap(),
            r
        );
        let bad = "1,x\n";
        assert!(matches!(
            RawDataset::from_csv_reader(bad.as_bytes(), false),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn count_check_rejects_fractions_and_negatives() {
        assert!(RawDataset::from_rows(&[[0.0], [3.0]])
            .unwrap()
            .check_counts()
            .is_ok());
        assert!(RawDataset::from_rows(&[[0.5]])
            .unwrap()
            .check_counts()
            .is_err());
        assert!(RawDataset::from_rows(&[[-1.0]])
            .unwrap()
            .check_counts()
            .is_err());
    }

    #[test]
    fn grid_counts_include_both_endpoints() {
        assert_eq!(support_grid_1d(0.0, 9.0, 1.0).unwrap().len(), 10);
        assert_eq!(support_grid_1d(0.0, 9.0, 0.5).unwrap().len(), 19);
        assert_eq!(support_grid_1d(0.0, 9.0, 0.1).unwrap().len(), 91);
        assert_eq!(support_grid_1d(0.0, 9.0, 0.01).unwrap().len(), 901);
        let g = support_grid_1d(9.0, 35.0, 0.02).unwrap();
        assert_eq!(g.len(), 1301);
        assert_eq!(g.row(1300), &[35.0]);
        assert!(support_grid_1d(0.0, 9.0, 0.0).is_err());
        assert!(support_grid_1d(9.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn lattice_has_all_combinations() {
        let s = support_lattice(&[-5.0, 0.0, 5.0], 3).unwrap();
        assert_eq!(s.len(), 27);
        assert_eq!(s.row(0), &[-5.0, -5.0, -5.0]);
        assert_eq!(s.row(1), &[-5.0, -5.0, 0.0]);
        assert_eq!(s.row(26), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn support_rows_must_be_distinct() {
        assert!(SupportSet::from_rows(&[[1.0], [1.0]]).is_err());
    }

    #[test]
    fn covariance_hand_values() {
        let s = sample_covariance(&RawDataset::from_rows(&[[0.0], [2.0]]).unwrap()).unwrap();
        assert_eq!(s.matrix()[(0, 0)], 2.0);
        let raw =
            RawDataset::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]).unwrap();
        let s = sample_covariance(&raw).unwrap();
        let expect = DMatrix::<f64>::identity(2, 2) * (2.0 / 3.0);
        assert!((s.matrix() - expect).abs().max() < 1e-15);
        assert!(sample_covariance(&RawDataset::from_rows(&[[1.0]]).unwrap()).is_err());
    }

    #[test]
    fn select_columns_reorders() {
        let raw = RawDataset::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(raw.select_columns(&[2, 0]).unwrap().row(0), &[3.0, 1.0]);
        assert!(raw.select_columns(&[3]).is_err());
    }
}
