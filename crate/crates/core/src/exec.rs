//! Parallel/sequential execution of data-parallel loops.
//!
//! Every hot kernel is written as a fill function over disjoint output chunks
//! (one chunk per output channel, or per batch example). The drivers here run
//! those fill functions either on the rayon pool or on the current thread.
//! Because each output element is produced by exactly one task with a fixed
//! inner summation order, the parallel and sequential paths are bit-identical.

/// Runs `fill(i, chunk)` over consecutive `chunk_len` chunks of `out`.
pub(crate) fn fill_chunks<F>(out: &mut [f64], chunk_len: usize, parallel: bool, fill: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    debug_assert!(chunk_len > 0 && out.len().is_multiple_of(chunk_len));
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| fill(i, chunk));
        return;
    }
    let _ = parallel;
    for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
        fill(i, chunk);
    }
}

/// Ordered map over `0..n`; results are collected in index order.
pub(crate) fn map_indexed<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// True when the crate was built with the `parallel` feature.
pub(crate) const fn default_parallel() -> bool {
    cfg!(feature = "parallel")
}
