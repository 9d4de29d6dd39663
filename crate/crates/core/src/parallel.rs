//! Data-parallel map used for batch gradients, evaluation sweeps and
//! Monte-Carlo checks.
//!
//! Results are always collected in input order and any reduction over them
//! happens sequentially afterwards, so outputs are bitwise independent of
//! the worker count. With the `parallel` feature disabled everything runs on
//! the calling thread.

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

/// Sequential reference path, always available (used by benches and by the
/// worker-count independence tests).
pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Maps over `0..n` in parallel; convenience for index-driven work.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(&idx, |&i| f(i))
}

/// Runs `f` inside a pool of exactly `threads` workers (parallel builds only;
/// otherwise just calls `f`).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Elementwise sum of equally shaped gradient lists, folded in order.
pub fn sum_in_order(mut parts: Vec<Vec<Vec<f64>>>) -> Option<Vec<Vec<f64>>> {
    if parts.is_empty() {
        return None;
    }
    let mut acc = parts.remove(0);
    for part in parts {
        for (a, p) in acc.iter_mut().zip(part) {
            a.iter_mut().zip(p).for_each(|(x, y)| *x += y);
        }
    }
    Some(acc)
}
