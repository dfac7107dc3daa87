//! Data-parallel helpers. With the `parallel` feature the closures run on the
//! rayon pool; without it they run sequentially in index order. Every helper
//! produces results in index order, so outputs are bit-identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fixed chunk size for ordered reductions. Chunk boundaries never depend on
/// the thread count, which keeps floating-point sums reproducible.
pub const REDUCE_CHUNK: usize = 64;

/// Calls `f(row_index, row)` for every `cols`-wide row of `data`.
pub fn for_each_row_mut<F>(data: &mut [f64], cols: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if cols == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(cols)
        .enumerate()
        .for_each(|(r, row)| f(r, row));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(cols)
        .enumerate()
        .for_each(|(r, row)| f(r, row));
}

/// Maps `0..n` through `f`, collecting in index order.
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

/// Whether this build runs the data-parallel paths on a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
