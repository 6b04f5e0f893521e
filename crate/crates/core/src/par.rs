//! Data-parallel map with an ordered, sequential fallback.
//!
//! Results are always returned in input order, so reductions performed by the
//! caller are bitwise identical whether or not the `parallel` feature is on.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_parallel<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

/// Maps `f` over `items`, in parallel when the feature is enabled.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_parallel(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
