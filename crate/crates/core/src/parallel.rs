//! Per-node work dispatch.
//!
//! Node-local computations (derivative evaluation, cubic solves, consensus row
//! mixing) are independent across nodes, so they map cleanly onto rayon. With
//! the `parallel` feature disabled everything degrades to plain loops. Results
//! are written into per-index slots, so the output is identical regardless of
//! worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    map_indexed_seq(n, f)
}

/// Sequential variant, always available (benchmark baseline).
pub fn map_indexed_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}
