//! Execution strategy for data-parallel loops.
//!
//! Every hot loop in the crate funnels through these helpers. With the
//! `parallel` feature (default) they dispatch to rayon unless parallelism has
//! been switched off at runtime with [`set_parallel`]; without the feature
//! they are plain sequential loops. Work is always partitioned over disjoint
//! output regions and each region is reduced sequentially, so results are
//! bit-identical regardless of strategy or thread count.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enable or disable rayon dispatch at runtime. Used by the benchmarks to
/// compare strategies within one process; tests may use it to pin behavior.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Apply `f(index, chunk)` over consecutive `chunk_len` pieces of `data`.
/// `data.len()` must be a multiple of `chunk_len`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert_eq!(data.len() % chunk_len.max(1), 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Map `f` over `items`, preserving order.
pub fn map_collect<A, B, F>(items: &[A], f: F) -> Vec<B>
where
    A: Sync,
    B: Send,
    F: Fn(&A) -> B + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Map `f` over an index range, preserving order.
pub fn map_indices<B, F>(n: usize, f: F) -> Vec<B>
where
    B: Send,
    F: Fn(usize) -> B + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_dispatch_matches_sequential() {
        let mut a = vec![0u32; 64];
        let mut b = vec![0u32; 64];
        set_parallel(true);
        for_each_chunk(&mut a, 8, |i, c| c.iter_mut().for_each(|v| *v = i as u32));
        set_parallel(false);
        for_each_chunk(&mut b, 8, |i, c| c.iter_mut().for_each(|v| *v = i as u32));
        set_parallel(true);
        assert_eq!(a, b);
    }
}
