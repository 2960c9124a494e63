//! Dispatch layer between sequential and data-parallel execution.
//!
//! Every hot kernel is written twice: a plain sequential loop and a rayon
//! version that splits work over disjoint output regions. The parallel
//! version never changes summation order within an output element, so both
//! paths produce bit-identical results and the choice is purely about speed.
//! With the `parallel` feature disabled the dispatch helpers compile down to
//! the sequential loop alone.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rough per-call flop count below which forking to the pool costs more
/// than it saves.
pub const PAR_THRESHOLD: usize = 200_000;

/// Whether the crate was built with the `parallel` feature.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Applies `f` to each equal-length chunk of `out`, in parallel when asked.
///
/// Chunks are disjoint, so the parallel path writes exactly the bytes the
/// sequential path writes.
pub fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, parallel: bool, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk_len > 0 && out.len() % chunk_len == 0);
    #[cfg(feature = "parallel")]
    if parallel {
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
        return;
    }
    let _ = parallel;
    for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

/// Maps `f` over `0..n` and collects the results in index order.
pub fn map_indexed<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel;
    (0..n).map(f).collect()
}

/// Sizes the global rayon pool. `threads == 0` keeps rayon's default.
///
/// Returns an error when the crate was built without the `parallel`
/// feature, or when the global pool was already initialized.
pub fn configure_threads(threads: usize) -> std::result::Result<(), String> {
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return Ok(());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| e.to_string())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        Err("this build has no `parallel` feature; thread count is fixed at 1".to_string())
    }
}
