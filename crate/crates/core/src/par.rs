//! Data-parallel helpers.
//!
//! Every helper produces output in index order so results are bit-identical
//! whether the work runs on the rayon pool or sequentially. With the
//! `parallel` feature disabled, or after [`set_parallel(false)`], all loops
//! run on the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Below this many scalar operations a loop is not worth splitting.
pub const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Toggle the parallel code paths at runtime. Has no effect without the
/// `parallel` feature.
pub fn set_parallel(enabled: bool) {
    ENABLED.store(enabled && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    ENABLED.load(Ordering::Relaxed)
}

/// `(0..n).map(f).collect()`, split across threads when `work` (an estimate
/// of the total scalar operations) is large enough.
pub fn map_indexed<T, F>(n: usize, work: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && work >= MIN_PARALLEL_WORK && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = work;
    (0..n).map(f).collect()
}

/// Fill `out[k] = f(k)` in place.
pub fn fill_indexed<T, F>(out: &mut [T], work: usize, f: F)
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && work >= MIN_PARALLEL_WORK && out.len() > 1 {
            use rayon::prelude::*;
            out.par_iter_mut()
                .enumerate()
                .for_each(|(k, slot)| *slot = f(k));
            return;
        }
    }
    let _ = work;
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = f(k);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_is_ordered_and_matches_sequential() {
        let par = map_indexed(100_000, usize::MAX, |k| (k as f64).sqrt());
        let seq: Vec<f64> = (0..100_000).map(|k| (k as f64).sqrt()).collect();
        assert_eq!(par, seq);
    }

    #[test]
    fn fill_matches_map() {
        let mut out = vec![0u64; 5000];
        fill_indexed(&mut out, usize::MAX, |k| (k * k) as u64);
        assert_eq!(out, map_indexed(5000, 0, |k| (k * k) as u64));
    }
}
