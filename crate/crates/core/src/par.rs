//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) an [`Executor`] with more than one
//! worker runs order-preserving maps on a dedicated rayon pool. Without the
//! feature, or with one worker, the same calls run on the current thread.
//! The worker count still decides how work is chunked, so results do not
//! depend on whether the feature is enabled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub struct Executor {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("workers", &self.workers).finish()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Self::new(1)
    }

    /// `workers == 0` means one worker per available core.
    pub fn new(workers: usize) -> Self {
        let workers = if workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            workers
        };
        #[cfg(feature = "parallel")]
        {
            let pool = (workers > 1).then(|| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .expect("failed to build rayon pool")
            });
            Self { workers, pool }
        }
        #[cfg(not(feature = "parallel"))]
        {
            Self { workers }
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Whether work actually runs on more than one thread.
    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        return self.pool.is_some();
        #[cfg(not(feature = "parallel"))]
        false
    }

    /// Maps `f` over `items`, preserving order.
    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    /// Maps `f` over contiguous chunks of at most `chunk` items, preserving order.
    pub fn map_chunks<T, R, F>(&self, items: &[T], chunk: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&[T]) -> R + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.par_chunks(chunk).map(&f).collect());
        }
        items.chunks(chunk).map(f).collect()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}
