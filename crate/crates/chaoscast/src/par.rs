//! Thin dispatch layer between rayon and plain iteration.
//!
//! Every helper maps over an input slice and collects results in input
//! order; reductions downstream happen sequentially over that ordered
//! vector. This keeps floating-point results bit-identical regardless of
//! thread count and identical to the sequential fallback, which the
//! deterministic-training guarantees rely on.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential code path even when compiled with `parallel`.
///
/// Affects the whole process. Results are identical either way; the switch
/// exists so benchmarks can measure both paths in one binary.
pub fn force_sequential(on: bool) {
    #[cfg(feature = "parallel")]
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
    #[cfg(not(feature = "parallel"))]
    let _ = on;
}

/// True when calls will actually fan out across threads.
pub fn is_parallel() -> bool {
    #[cfg(feature = "parallel")]
    {
        !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Map `f` over `items`, preserving input order in the output.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return items.par_iter().map(&f).collect();
    }
    items.iter().map(&f).collect()
}

/// Map `f` over the index range `0..n`, preserving order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return (0..n).into_par_iter().map(&f).collect();
    }
    (0..n).map(&f).collect()
}
