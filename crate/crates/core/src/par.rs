//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) large batches are spread over
//! the rayon pool. Without it, or for [`Execution::Sequential`], every helper
//! runs inline. Results are always in input order, so both modes produce
//! identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Batches smaller than this run inline even in parallel mode.
pub const PARALLEL_THRESHOLD: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    #[cfg(feature = "parallel")]
    fn go_wide(self, len: usize) -> bool {
        self == Execution::Parallel && len >= PARALLEL_THRESHOLD
    }
}

pub fn num_threads() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();

    #[cfg(not(feature = "parallel"))]
    return 1;
}

/// Order-preserving `filter_map` over a slice.
pub fn filter_map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Option<R> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.go_wide(items.len()) {
        return items.par_iter().filter_map(f).collect();
    }
    let _ = exec;
    items.iter().filter_map(f).collect()
}

/// Order-preserving `map` over a slice.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.go_wide(items.len()) {
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}
