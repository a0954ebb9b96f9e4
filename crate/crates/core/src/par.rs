//! Order-preserving document-parallel execution.
//!
//! Every corpus-level stage maps a pure function over documents. The
//! [`Executor`] decides whether that map runs on a dedicated rayon pool or
//! on the calling thread. Results are always reassembled in input order, so
//! `jobs = 1` and `jobs = N` produce identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs per-item closures either sequentially or on a fixed-size pool.
pub struct Executor {
    jobs: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("jobs", &self.jobs).finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Executor {
            jobs: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// `jobs == 0` means "one worker per available core". Without the
    /// `parallel` feature the request is accepted and ignored.
    pub fn new(jobs: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            let jobs = if jobs == 0 {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            } else {
                jobs
            };
            if jobs <= 1 {
                return Self::sequential();
            }
            match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
                Ok(pool) => Executor {
                    jobs,
                    pool: Some(pool),
                },
                Err(err) => {
                    log::warn!("falling back to sequential execution: {err}");
                    Self::sequential()
                }
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = jobs;
            Self::sequential()
        }
    }

    pub fn jobs(&self) -> usize {
        self.jobs
    }

    pub fn is_parallel(&self) -> bool {
        self.jobs > 1
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

    /// Like [`Executor::map`] but passes the item index too.
    pub fn map_indexed<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| {
                items
                    .par_iter()
                    .enumerate()
                    .map(|(i, t)| f(i, t))
                    .collect()
            });
        }
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }

    /// Evaluates `f(i)` for `i in 0..n`, preserving order.
    pub fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }

    /// Fallible order-preserving map; the first error in input order wins.
    pub fn try_map<T, R, E, F>(&self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(&T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_across_job_counts() {
        let items: Vec<u64> = (0..10_000).collect();
        let seq = Executor::sequential().map(&items, |x| x * x + 1);
        let par = Executor::new(4).map(&items, |x| x * x + 1);
        assert_eq!(seq, par);
    }

    #[test]
    fn try_map_reports_first_error_in_input_order() {
        let items: Vec<i32> = vec![1, -2, 3, -4];
        let res: Result<Vec<i32>, i32> =
            Executor::new(3).try_map(&items, |&x| if x < 0 { Err(x) } else { Ok(x) });
        assert_eq!(res, Err(-2));
    }

    #[test]
    fn zero_jobs_means_auto() {
        let exec = Executor::new(0);
        assert!(exec.jobs() >= 1);
        assert_eq!(exec.map_range(5, |i| i), vec![0, 1, 2, 3, 4]);
    }
}
