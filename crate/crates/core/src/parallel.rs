//! Index-ordered parallel map over a private thread pool.

use rayon::prelude::*;

/// A fixed number of worker threads. Results of [`Workers::map`] are in
/// index order, so output never depends on the worker count.
pub struct Workers {
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    /// `n = 1` runs everything on the calling thread; `n = 0` uses all cores.
    pub fn new(n: usize) -> Self {
        let pool = (n != 1)
            .then(|| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok())
            .flatten();
        Self { pool }
    }

    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            Some(pool) if n > 1 => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
            _ => (0..n).map(f).collect(),
        }
    }
}

pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    Workers::new(workers).map(n, f)
}
