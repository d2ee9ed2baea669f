//! Batch-parallel helpers with a sequential fallback.
//!
//! Every data-parallel loop in the crate goes through [`map_batch`] (or the
//! indexed variant). With the `parallel` feature the work is distributed via
//! rayon; without it the same closure runs on a plain iterator. Outputs are
//! collected in input order and any reduction over them happens sequentially
//! afterwards, so the two paths — and any thread count — produce bit-identical
//! results.
//!
//! Both concrete implementations are always compiled so benchmarks can compare
//! them directly; the feature flag only selects which one the crate-internal
//! call sites dispatch to.

/// Sequential implementation: a plain ordered `map`.
pub fn map_batch_sequential<T, O, F>(items: &[T], f: F) -> Vec<O>
where
    T: Sync,
    O: Send,
    F: Fn(&T) -> O + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Parallel implementation backed by rayon. Order of the collected output
/// matches the input order regardless of scheduling.
#[cfg(feature = "parallel")]
pub fn map_batch_parallel<T, O, F>(items: &[T], f: F) -> Vec<O>
where
    T: Sync,
    O: Send,
    F: Fn(&T) -> O + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, in parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn map_batch<T, O, F>(items: &[T], f: F) -> Vec<O>
where
    T: Sync,
    O: Send,
    F: Fn(&T) -> O + Sync + Send,
{
    map_batch_parallel(items, f)
}

/// Map `f` over `items`, in parallel when the `parallel` feature is enabled.
#[cfg(not(feature = "parallel"))]
pub fn map_batch<T, O, F>(items: &[T], f: F) -> Vec<O>
where
    T: Sync,
    O: Send,
    F: Fn(&T) -> O + Sync + Send,
{
    map_batch_sequential(items, f)
}

/// Indexed map over `0..n`, parallel under the `parallel` feature.
///
/// Used where the work items are produced from an index rather than a slice
/// (e.g. per-sample slots of a shared batch tensor).
pub fn map_indexed<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Sequential counterpart of [`map_indexed`], always available for benchmarks.
pub fn map_indexed_sequential<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Run `f` inside a rayon pool restricted to `threads` workers (0 = rayon
/// default). Without the `parallel` feature `f` simply runs on this thread.
pub fn with_thread_limit<O: Send>(threads: usize, f: impl FnOnce() -> O + Send) -> O {
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return f();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build rayon pool");
        pool.install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
