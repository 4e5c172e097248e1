//! Parallel map over independent work items.
//!
//! Training steps are strictly sequential (tape confinement, timing
//! validity), so parallelism applies only to run-level sweeps and Monte
//! Carlo verification loops where items are independent and individually
//! seeded. With the `parallel` feature disabled, or `workers <= 1`, the
//! same API degrades to a plain sequential loop producing identical output.

/// Worker-count override read from the environment by the harness.
pub const WORKERS_ENV: &str = "SSVAE_WORKERS";

/// Resolve the effective worker count: explicit config beats the
/// environment variable, which beats the number of available cores.
pub fn resolve_workers(configured: Option<usize>) -> usize {
    if let Some(w) = configured {
        return w.max(1);
    }
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        if let Ok(w) = v.trim().parse::<usize>() {
            return w.max(1);
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Apply `f` to 0..n, returning results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.min(n))
        .build()
        .expect("thread pool");
    pool.install(|| {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    })
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, _workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
