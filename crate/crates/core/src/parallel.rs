//! Thread-count control for the data-parallel kernels.
//!
//! Every parallel kernel in the crate writes results into per-item slots or
//! fixed-size chunks that are merged in index order, so the output does not
//! depend on the number of worker threads.

use rayon::ThreadPoolBuilder;

/// Environment variable consulted when no explicit thread count is given.
pub const THREADS_ENV: &str = "DIFFTRANS_THREADS";

/// Runs `f` inside a rayon pool with `threads` workers (0 = rayon default).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return f();
    }
    let pool = ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("failed to build thread pool");
    pool.install(f)
}

/// Resolves the thread count: explicit value, then `DIFFTRANS_THREADS`, then 0.
pub fn resolve_threads(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or(0)
}
