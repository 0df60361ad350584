//! Order-preserving data-parallel map.
//!
//! With the `parallel` feature and more than one worker, items are spread over
//! a dedicated rayon pool. Otherwise everything runs on the calling thread.
//! Results always come back in input order, so downstream reductions stay
//! sequential and bitwise reproducible regardless of worker count.

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
    pub fn new(workers: usize) -> Self {
        let workers = workers.max(1);
        #[cfg(feature = "parallel")]
        {
            let pool = (workers > 1).then(|| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .expect("rayon pool")
            });
            Executor { workers, pool }
        }
        #[cfg(not(feature = "parallel"))]
        {
            if workers > 1 {
                log::debug!("built without `parallel`; running {workers} workers sequentially");
            }
            Executor { workers: 1 }
        }
    }

    pub fn sequential() -> Self {
        Self::new(1)
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    pub fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        let idx: Vec<usize> = (0..n).collect();
        self.map(&idx, |&i| f(i))
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_preserved_for_any_worker_count() {
        let items: Vec<u64> = (0..257).collect();
        let seq = Executor::sequential().map(&items, |x| x * x + 1);
        let par = Executor::new(4).map(&items, |x| x * x + 1);
        assert_eq!(seq, par);
    }
}
