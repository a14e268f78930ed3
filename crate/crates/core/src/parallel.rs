//! Thin indirection over rayon so the data-parallel inner loops (N-D column
//! solves, finite-difference Jacobians, probe batches) fall back to plain
//! iteration when the `parallel` feature is disabled.

/// Maps `f` over `0..len`, in parallel when the `parallel` feature is on.
/// Results come back in index order either way.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..len).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..len).map(f).collect()
}

/// Sequential reference path, kept callable regardless of features so the
/// benchmark suite can compare both on one build.
pub fn seq_map_indexed<T, F>(len: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..len).map(f).collect()
}
