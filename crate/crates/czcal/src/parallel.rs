//! Execution context for data-parallel sweeps.
//!
//! Modules never spawn their own workers; whoever drives a sweep passes a
//! [`Parallelism`] describing where the work may run. With the `parallel`
//! feature (default) work fans out over rayon; without it every context
//! degrades to sequential iteration, so the crate builds and runs with no
//! rayon dependency at all.

#[cfg(feature = "parallel")]
use std::sync::Arc;

#[derive(Clone, Default)]
pub struct Parallelism {
    mode: Mode,
}

#[derive(Clone, Default)]
enum Mode {
    /// Plain iteration on the calling thread.
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    /// The global rayon pool.
    #[cfg(feature = "parallel")]
    #[default]
    Global,
    /// A dedicated pool, sized explicitly (CLI `--threads`).
    #[cfg(feature = "parallel")]
    Pool(Arc<rayon::ThreadPool>),
}

impl Parallelism {
    pub fn sequential() -> Self {
        Parallelism { mode: Mode::Sequential }
    }

    /// Context with `n` worker threads. `n == 0` means the rayon default;
    /// `n == 1` or a build without the `parallel` feature is sequential.
    pub fn with_threads(n: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            match n {
                0 => Parallelism { mode: Mode::Global },
                1 => Self::sequential(),
                _ => {
                    let pool = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build()
                        .expect("rayon pool");
                    Parallelism { mode: Mode::Pool(Arc::new(pool)) }
                }
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = n;
            Self::sequential()
        }
    }

    pub fn is_sequential(&self) -> bool {
        matches!(self.mode, Mode::Sequential)
    }

    /// Map `f` over `0..n`, preserving index order in the result. Results are
    /// collected positionally, so the output (and any reduction over it) is
    /// independent of scheduling.
    pub fn map<U, F>(&self, n: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        match &self.mode {
            Mode::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Mode::Global => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(feature = "parallel")]
            Mode::Pool(pool) => {
                use rayon::prelude::*;
                pool.install(|| (0..n).into_par_iter().map(f).collect())
            }
        }
    }

    /// Map `f` over a slice, preserving order.
    pub fn map_slice<T, U, F>(&self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        self.map(items.len(), |i| f(&items[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let ctx = Parallelism::default();
        let out = ctx.map(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let seq = Parallelism::sequential().map(64, |i| (i as f64).sqrt());
        let par = Parallelism::default().map(64, |i| (i as f64).sqrt());
        assert_eq!(seq, par);
    }

    #[test]
    fn thread_counts() {
        for n in [0, 1, 2, 4] {
            let ctx = Parallelism::with_threads(n);
            assert_eq!(ctx.map(10, |i| i), (0..10).collect::<Vec<_>>());
        }
    }
}
