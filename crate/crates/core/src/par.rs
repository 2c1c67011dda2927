//! Data-parallel helpers with a sequential fallback.
//!
//! Every per-pixel loop in the crate goes through these helpers so the same
//! code path runs on rayon when the `parallel` feature is enabled and on a
//! plain iterator otherwise. Results never depend on the mode: each element
//! is computed independently.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a data-parallel loop is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    /// Falls back to [`Parallelism::Sequential`] when the crate is built
    /// without the `parallel` feature.
    #[default]
    Parallel,
}

impl Parallelism {
    /// The mode that will actually run.
    pub fn effective(self) -> Self {
        if cfg!(feature = "parallel") {
            self
        } else {
            Parallelism::Sequential
        }
    }
}

// Rows shorter than this are not worth a rayon task each.
#[cfg(feature = "parallel")]
const MIN_PAR_ROWS: usize = 8;

/// Calls `f(row_index, row)` for each `row_len`-sized chunk of `data`.
pub fn for_each_row_mut<T, F>(data: &mut [T], row_len: usize, mode: Parallelism, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    assert!(row_len > 0, "row length must be positive");
    match mode.effective() {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => data
            .par_chunks_mut(row_len)
            .with_min_len(MIN_PAR_ROWS)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
        _ => data
            .chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map_collect<T, U, F>(items: &[T], mode: Parallelism, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Send + Sync,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}
