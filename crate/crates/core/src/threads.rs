//! Worker-pool setup. `PHYSMLE_THREADS` caps rayon parallelism; the
//! kernels assign each output element to exactly one task, so results
//! are byte-identical for any thread count.

use std::sync::Once;

static INIT: Once = Once::new();

/// Build the global rayon pool, honoring `PHYSMLE_THREADS` when set.
/// Safe to call more than once; only the first call has an effect.
pub fn init() {
    INIT.call_once(|| {
        if let Ok(v) = std::env::var("PHYSMLE_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    // Ignore the error: a pool may already exist in tests.
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}
