//! Worker-count control for the data-parallel kernels.

use rayon::ThreadPoolBuilder;

/// Environment variable that overrides the default worker count.
pub const WORKERS_ENV: &str = "DCLS_WORKERS";

/// Run `f` on a dedicated pool of `workers` threads. `0` means rayon's default.
pub fn with_workers<R, F>(workers: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    let pool = ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("failed to build worker pool");
    pool.install(f)
}

/// Worker count from [`WORKERS_ENV`], if set to a positive integer.
pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Number of threads the current pool would use.
pub fn current_workers() -> usize {
    rayon::current_num_threads()
}
