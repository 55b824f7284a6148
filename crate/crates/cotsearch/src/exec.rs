//! Parallel map helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these fan out over rayon; without
//! it they run in order on the calling thread. Work items carry their own
//! keyed RNG streams, so outputs are identical either way and at any
//! thread count. `seq_map` is always sequential, kept public so benchmarks
//! can compare the two paths on the same workload.

/// Map in parallel where available, preserving input order.
#[cfg(feature = "parallel")]
pub fn par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}

/// Fallible variant: the first error (in input order) wins.
#[cfg(feature = "parallel")]
pub fn par_map_result<I, O, F>(items: &[I], f: F) -> crate::Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> crate::Result<O> + Sync + Send,
{
    par_map(items, f).into_iter().collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_result<I, O, F>(items: &[I], f: F) -> crate::Result<Vec<O>>
where
    F: Fn(&I) -> crate::Result<O>,
{
    items.iter().map(f).collect()
}

/// Always-sequential map, for benchmarking against the parallel path.
pub fn seq_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}

/// Pin the global worker-pool size. Affects wall clock only, never
/// results; a no-op on sequential builds or if a pool already exists.
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) {
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: usize) {}
