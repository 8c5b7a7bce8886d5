//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan work out over the rayon pool;
//! without it (or after [`set_parallel(false)`](set_parallel)) they run the
//! same closures sequentially. Every helper hands each closure a disjoint
//! output slot and any reduction happens afterwards in index order, so results
//! are bitwise identical in both modes.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Minimum amount of work (roughly multiply-adds) per call before the
/// parallel path is taken.
const MIN_PARALLEL_WORK: usize = 1 << 14;

/// Toggles the parallel path at runtime. Has no effect when the crate is
/// built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    ENABLED.store(enabled, Ordering::Relaxed);
}

/// Whether the parallel path is compiled in and currently enabled.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Runs `f(index, chunk)` over consecutive `chunk_len`-sized chunks of `data`.
/// `work` is an estimate of the total cost, used to skip the pool for tiny jobs.
pub fn for_each_chunk<F>(data: &mut [f64], chunk_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && work >= MIN_PARALLEL_WORK && data.len() > chunk_len {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
            return;
        }
    }
    let _ = work;
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}

/// Maps `f` over `0..len` and collects the results in index order.
pub fn map_indexed<T, F>(len: usize, work: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() && work >= MIN_PARALLEL_WORK && len > 1 {
            use rayon::prelude::*;
            return (0..len).into_par_iter().map(f).collect();
        }
    }
    let _ = work;
    (0..len).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_visit_every_index_once() {
        let mut data = vec![0.0; 12];
        for_each_chunk(&mut data, 3, usize::MAX, |i, chunk| {
            for v in chunk.iter_mut() {
                *v = i as f64;
            }
        });
        assert_eq!(data, [0., 0., 0., 1., 1., 1., 2., 2., 2., 3., 3., 3.]);
    }

    #[test]
    fn map_preserves_order() {
        let out = map_indexed(100, usize::MAX, |i| i * 2);
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }
}
