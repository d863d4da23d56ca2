//! Execution policy for the data-parallel loops (per-example graphs in a
//! training batch, corpus embedding, retrieval scans, sampling simulations).
//!
//! Results are always returned in index order and reduced sequentially by
//! the caller, so both policies produce bitwise-identical numbers. Without
//! the `parallel` feature, [`Exec::Parallel`] silently runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when work will actually be spread over the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// `(0..n).map(f).collect()`, possibly on the rayon pool.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Fallible variant of [`Exec::map`]; returns the first error by index.
    pub fn try_map<T, E, F>(self, n: usize, f: F) -> Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> Result<T, E> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }

    /// Consumes `items`, mapping each with its index; output keeps input order.
    pub fn map_vec<T, U, F>(self, items: Vec<T>, f: F) -> Vec<U>
    where
        T: Send,
        U: Send,
        F: Fn(usize, T) -> U + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return items.into_par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
        }
        items.into_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }

    /// Maps over a slice in place.
    pub fn for_each_mut<T, F>(self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
            return;
        }
        items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
    }
}
