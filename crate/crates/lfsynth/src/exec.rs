//! Data-parallel loop helpers with a sequential fallback.
//!
//! With the `parallel` feature these dispatch to rayon (whatever thread pool
//! is installed at the call site); without it they run plain sequential
//! loops. Every helper preserves index order and writes disjoint regions, so
//! results are bitwise identical regardless of feature flags or thread count.
//! Reductions are never done here: callers collect per-index results and fold
//! them in index order themselves.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Run `f(chunk_index, chunk)` over consecutive disjoint chunks of `buf`.
///
/// `min_chunks_per_task` bounds scheduling overhead for small rows; it has no
/// effect on the values written.
pub fn for_each_chunk<T, F>(buf: &mut [T], chunk_len: usize, min_chunks_per_task: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk_len > 0 && buf.len() % chunk_len == 0);
    #[cfg(feature = "parallel")]
    {
        buf.par_chunks_mut(chunk_len)
            .with_min_len(min_chunks_per_task.max(1))
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = min_chunks_per_task;
        buf.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Run `f(first_row, block)` over blocks of `rows_per_block` consecutive rows
/// (the final block may be shorter). Blocking is a scheduling choice only;
/// callers compute each row identically regardless of which block holds it.
pub fn for_each_row_block<T, F>(buf: &mut [T], row_len: usize, rows_per_block: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(row_len > 0 && buf.len() % row_len == 0);
    let chunk = row_len * rows_per_block.max(1);
    #[cfg(feature = "parallel")]
    {
        buf.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i * rows_per_block, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i * rows_per_block, c));
    }
}

/// Map `f` over `0..n` sequentially. Exists so benchmarks can compare the
/// parallel helpers against a guaranteed-sequential path within one build.
pub fn seq_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
