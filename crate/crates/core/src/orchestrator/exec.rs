//! Execution backend: data-parallel over rayon when the `parallel` feature
//! is enabled, plain iteration otherwise. Both paths preserve input order,
//! and all numerical work is seeded per item, so results are identical
//! whichever backend runs them.

#[cfg(feature = "parallel")]
pub(crate) fn run_batch<T, U, F>(items: Vec<T>, workers: usize, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    if workers <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("failed to build worker pool");
    pool.install(|| {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    })
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn run_batch<T, U, F>(items: Vec<T>, _workers: usize, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Order-preserving map for nested work (candidate shards) that reuses the
/// pool already installed by [`run_batch`].
#[cfg(feature = "parallel")]
pub(crate) fn map_nested<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_nested<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_iter().map(f).collect()
}
