//! Chunked data-parallel helpers.
//!
//! Kernels split their row-wise work into fixed-size chunks, map each chunk
//! independently, and combine the per-chunk results in chunk order. Because
//! the chunk boundaries and the combination order are fixed, the output is
//! bit-identical whether chunks run on rayon (`parallel` feature, default)
//! or on the sequential fallback.

/// Rows per chunk for batch kernels.
pub(crate) const ROW_CHUNK: usize = 64;

/// Maps fixed-size chunks of `items` to results, sequentially.
///
/// `f` receives the index of the chunk's first element and the chunk slice.
#[cfg_attr(feature = "parallel", allow(dead_code))]
pub(crate) fn map_chunks_seq<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync,
{
    items
        .chunks(chunk)
        .enumerate()
        .map(|(i, c)| f(i * chunk, c))
        .collect()
}

/// Maps fixed-size chunks of `items` to results, in parallel when the
/// `parallel` feature is enabled. Results are collected in chunk order.
#[cfg(feature = "parallel")]
pub(crate) fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync,
{
    use rayon::prelude::*;
    items
        .par_chunks(chunk)
        .enumerate()
        .map(|(i, c)| f(i * chunk, c))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) use map_chunks_seq as map_chunks;
