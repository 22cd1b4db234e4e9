//! Parallel execution switch.
//!
//! Compute kernels and the data pipeline are data-parallel over independent
//! output slices. With the `parallel` feature enabled (the default) they run
//! on the rayon pool; with the feature disabled, or after
//! [`set_parallel`]`(false)`, they take an equivalent sequential path.
//! All parallel loops write disjoint outputs in a fixed order, so results
//! are bitwise identical between the two paths.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Whether parallel execution is currently enabled.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Enable or disable parallel execution at runtime. Returns the previous
/// setting. A no-op (always sequential) when the `parallel` feature is off.
pub fn set_parallel(on: bool) -> bool {
    PARALLEL.swap(on, Ordering::Relaxed)
}

/// Configure the global thread pool from `AVWWS_NUM_WORKERS`.
///
/// Call once at process start; later calls are ignored (the pool can only
/// be built once). Unset or unparsable values leave the rayon default.
pub fn init_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(v) = std::env::var("AVWWS_NUM_WORKERS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    }
}

// Below this many independent work items the spawn overhead outweighs the
// speedup on small kernels.
const MIN_PAR_ITEMS: usize = 2;

/// `(0..n).map(f)` collected in index order, in parallel when enabled.
pub(crate) fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n >= MIN_PAR_ITEMS {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Apply `f(chunk_index, chunk)` over consecutive `chunk_len` slices of
/// `data`, in parallel when enabled. `data.len()` must be a multiple of
/// `chunk_len`.
pub(crate) fn for_each_chunk_mut<S, F>(data: &mut [S], chunk_len: usize, f: F)
where
    S: Send,
    F: Fn(usize, &mut [S]) + Sync + Send,
{
    debug_assert!(chunk_len > 0 && data.len() % chunk_len == 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() / chunk_len >= MIN_PAR_ITEMS {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_parallel_agree() {
        let f = |i: usize| (i as f64).sin();
        let prev = set_parallel(false);
        let seq = map_collect(100, f);
        set_parallel(true);
        let par = map_collect(100, f);
        set_parallel(prev);
        assert_eq!(seq, par);
    }
}
