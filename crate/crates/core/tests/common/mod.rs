#![allow(dead_code)]

use pdmix::density::LikelihoodMatrix;
use pdmix::problem::Problem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random dense problem: `m` supports, `d` distinct observations, entries
/// in `[0.05, 1]`, counts in `1..=5`.
pub fn random_problem(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Problem {
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..d).map(|_| rng.random_range(0.05..1.0)).collect())
        .collect();
    let counts: Vec<u64> = (0..d).map(|_| rng.random_range(1..=5)).collect();
    Problem::new(LikelihoodMatrix::from_rows(&rows).unwrap(), &counts).unwrap()
}

/// Random problem with sizes drawn from `1..=max_m` and `1..=max_d`.
pub fn random_sized(rng: &mut ChaCha8Rng, max_m: usize, max_d: usize) -> Problem {
    let m = rng.random_range(1..=max_m);
    let d = rng.random_range(1..=max_d);
    random_problem(rng, m, d)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
