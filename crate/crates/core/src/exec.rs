//! Data-parallel execution with a sequential fallback.
//!
//! Batched work is cut into fixed-size chunks whose boundaries do not depend on
//! the thread count, and partial results are combined by a pairwise tree in
//! chunk order. Sequential and parallel runs therefore produce bit-identical
//! results.

use std::ops::Range;
use std::sync::atomic::{AtomicU8, Ordering};

/// Rows per work item for batched evaluations.
pub const CHUNK_ROWS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

static POLICY: AtomicU8 = AtomicU8::new(1);

/// Selects the process-wide execution policy. `Parallel` degrades to
/// sequential when the crate is built without the `parallel` feature.
pub fn set_execution(e: Execution) {
    POLICY.store(
        match e {
            Execution::Sequential => 0,
            Execution::Parallel => 1,
        },
        Ordering::Relaxed,
    );
}

pub fn execution() -> Execution {
    if cfg!(feature = "parallel") && POLICY.load(Ordering::Relaxed) == 1 {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// Caps the global worker pool. `0` keeps rayon's default. Only the first
/// call in a process has an effect.
pub fn configure_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        if threads > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(n))
        .collect()
}

/// Evaluates `f(0..count)` and returns the results in index order.
pub fn map_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match execution() {
        #[cfg(feature = "parallel")]
        Execution::Parallel if count > 1 => {
            use rayon::prelude::*;
            (0..count).into_par_iter().map(f).collect()
        }
        _ => (0..count).map(f).collect(),
    }
}

/// Like [`map_indexed`] over fixed-size row chunks of `0..n`.
pub fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let ranges = chunk_ranges(n, CHUNK_ROWS);
    map_indexed(ranges.len(), |c| f(ranges[c].clone()))
}

/// Pairwise sum of equally long vectors in a fixed tree order.
pub fn tree_sum(mut parts: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    if parts.is_empty() {
        return None;
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop()
}

/// Pairwise sum of scalars in a fixed tree order.
pub fn tree_sum_scalars(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let mid = n / 2;
            tree_sum_scalars(&values[..mid]) + tree_sum_scalars(&values[mid..])
        }
    }
}
