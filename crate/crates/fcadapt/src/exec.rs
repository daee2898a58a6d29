//! Data-parallel execution over subjects.
//!
//! Per-subject work (loading, graph construction, forward/backward passes)
//! is embarrassingly parallel. With the `parallel` feature enabled the work
//! fans out through rayon; results are collected **in input order** and any
//! reduction happens sequentially afterwards, so outputs are bit-identical
//! to the sequential path regardless of thread count. Without the feature
//! everything runs on the calling thread.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runtime switch between the rayon path and the sequential fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

/// Maps `f` over `0..n`, preserving index order in the output.
#[cfg(feature = "parallel")]
pub fn map_indices<U, F>(n: usize, mode: ExecMode, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode {
        ExecMode::Parallel => (0..n).into_par_iter().map(f).collect(),
        ExecMode::Sequential => (0..n).map(f).collect(),
    }
}

/// Maps `f` over `0..n`, preserving index order in the output.
#[cfg(not(feature = "parallel"))]
pub fn map_indices<U, F>(n: usize, _mode: ExecMode, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let seq = map_indices(100, ExecMode::Sequential, |i| i * i);
        let par = map_indices(100, ExecMode::Parallel, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }
}
