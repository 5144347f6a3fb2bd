//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run the same closures sequentially. Every helper returns results in
//! index order, so numerical output is identical in both modes.

use ndarray::{Array2, ArrayViewMut1, Zip};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n` and collects results in index order.
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

/// Maps `f` over the items of a slice, preserving order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Applies `f(row_index, row)` to every row of `a`.
pub fn for_each_row_mut<F>(a: &mut Array2<f64>, f: F)
where
    F: Fn(usize, ArrayViewMut1<'_, f64>) + Sync + Send,
{
    let zip = Zip::indexed(a.rows_mut());
    #[cfg(feature = "parallel")]
    zip.par_for_each(f);
    #[cfg(not(feature = "parallel"))]
    zip.for_each(f);
}

/// Whether this build runs the data-parallel paths.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Configures the global worker pool. A no-op in sequential builds.
pub fn set_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        if threads > 0 {
            // Fails only if the pool was already initialised; the first
            // configuration wins.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
