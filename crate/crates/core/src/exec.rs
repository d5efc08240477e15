//! Data-parallel execution of independent, index-addressed work items.
//!
//! Every Monte-Carlo loop in the crate (outer width draws, lemma trials,
//! GD trials) goes through [`map_indexed`]. Work item `i` derives all of its
//! randomness from a substream keyed by `i`, and results come back in index
//! order, so reductions performed by the caller are bitwise identical for
//! any thread count.
//!
//! With the `parallel` feature (default) items are scheduled on the rayon
//! pool. Without it, or inside [`run_sequential`], they run in a plain loop.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with every nested [`map_indexed`] call on this thread executed
/// sequentially.
pub fn run_sequential<R>(f: impl FnOnce() -> R) -> R {
    let previous = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(previous));
    out
}

/// Whether [`map_indexed`] would currently fan out across threads.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|c| c.get())
}

/// Evaluates `f(0), f(1), ..., f(n-1)` and returns the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
