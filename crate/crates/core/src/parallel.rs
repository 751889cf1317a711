//! Data-parallel iteration helpers.
//!
//! With the `parallel` feature (default) the indexed maps run on rayon;
//! without it they degrade to plain sequential loops. Results are collected
//! in index order, so output never depends on scheduling. Callers that need
//! a sequential pass while the feature is enabled (benchmarks, determinism
//! checks) pass `parallel = false`.

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// Whether the parallel backend is compiled in.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Builds the global rayon pool from the `GSWM_THREADS` environment
/// variable. Call once at process start; returns the applied thread count.
#[cfg(feature = "parallel")]
pub fn init_threads_from_env() -> Option<usize> {
    let n: usize = std::env::var("GSWM_THREADS").ok()?.parse().ok()?;
    let n = n.max(1);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .ok()?;
    Some(n)
}

#[cfg(not(feature = "parallel"))]
pub fn init_threads_from_env() -> Option<usize> {
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let seq = map_indexed(100, false, |i| i * i);
        let par = map_indexed(100, true, |i| i * i);
        assert_eq!(seq, par);
    }
}
