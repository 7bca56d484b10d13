//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) work fans out over rayon's pool;
//! without it every helper runs the same closures in a plain loop. Results
//! are always assembled in index order, so outputs do not depend on the
//! thread count or on whether the feature is enabled.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Environment variable read by [`init_threads`].
pub const THREADS_ENV: &str = "GAITSET_THREADS";

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Switch parallel execution on or off at runtime (no-op without the feature).
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Size the global pool from `GAITSET_THREADS`, if set. Returns the
/// effective worker count.
pub fn init_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
            // Ignore the error when a pool already exists.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Run `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && data.len() > chunk {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(100, |i| i * i);
        assert!(v.iter().enumerate().all(|(i, &x)| x == i * i));
    }

    #[test]
    fn chunks_visit_everything_once() {
        let mut data = vec![0usize; 37];
        for_each_chunk_mut(&mut data, 5, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x += ci * 5 + j;
            }
        });
        assert!(data.iter().enumerate().all(|(i, &x)| x == i));
    }
}
