//! Ordered map helpers: data-parallel with the `parallel` feature,
//! sequential otherwise. Results always come back in input order so that
//! downstream reductions are independent of the worker count.

use crate::error::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

/// Like [`map`], stopping at the first error in input order.
pub fn try_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

/// [`try_map`] over `0..n`.
pub fn try_map_range<U, F>(n: usize, f: F) -> Result<Vec<U>>
where
    U: Send,
    F: Fn(usize) -> Result<U> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    let out: Vec<Result<U>> = (0..n).into_par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    let out: Vec<Result<U>> = (0..n).map(f).collect();
    out.into_iter().collect()
}

/// Whether this build fans work out over a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
