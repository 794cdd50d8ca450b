//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (on by default) batch work runs on a rayon
//! pool; without it every [`Execution`] runs sequentially. Results are always
//! returned in input order, so the choice never changes output.

use std::sync::Arc;

use chrono::{DateTime, Utc};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// `threads == 0` means rayon's global pool.
    Parallel { threads: usize },
}

impl Execution {
    pub fn with_threads(threads: usize) -> Self {
        if threads <= 1 {
            Execution::Sequential
        } else {
            Execution::Parallel { threads }
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && matches!(self, Execution::Parallel { .. })
    }
}

impl Default for Execution {
    fn default() -> Self {
        Execution::Parallel { threads: 0 }
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map_ordered<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel { threads } => {
            use rayon::prelude::*;
            run_in_pool(threads, || items.par_iter().map(&f).collect())
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Folds shards of `items` into accumulators and merges them. `merge` must be
/// associative and commutative for the parallel path to equal the sequential one.
pub fn fold_merge<T, A, Id, Fold, Merge>(
    items: &[T],
    exec: Execution,
    identity: Id,
    fold: Fold,
    #[cfg_attr(not(feature = "parallel"), allow(unused_variables))] merge: Merge,
) -> A
where
    T: Sync,
    A: Send,
    Id: Fn() -> A + Sync + Send,
    Fold: Fn(A, &T) -> A + Sync + Send,
    Merge: Fn(A, A) -> A + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel { threads } => {
            use rayon::prelude::*;
            run_in_pool(threads, || {
                items
                    .par_iter()
                    .fold(&identity, &fold)
                    .reduce(&identity, &merge)
            })
        }
        _ => items.iter().fold(identity(), fold),
    }
}

#[cfg(feature = "parallel")]
fn run_in_pool<R: Send>(threads: usize, op: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return op();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(op),
        Err(err) => {
            tracing::warn!(%err, "falling back to the global rayon pool");
            op()
        }
    }
}

/// Source of "now"; fixed in tests so records are reproducible.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

pub type SharedClock = Arc<dyn Clock>;

/// 64-bit FNV-1a. Used to derive per-product seeds that are stable across
/// platforms and compiler versions (unlike `DefaultHasher`).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_for_every_strategy() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = map_ordered(&items, Execution::Sequential, |x| x * 3);
        for threads in [0, 2, 7] {
            let par = map_ordered(&items, Execution::Parallel { threads }, |x| x * 3);
            assert_eq!(seq, par);
        }
    }

    #[test]
    fn fold_merge_matches_sequential() {
        let items: Vec<u64> = (1..=10_000).collect();
        let sum = |exec| fold_merge(&items, exec, || 0u64, |a, x| a + x, |a, b| a + b);
        assert_eq!(sum(Execution::Sequential), 50_005_000);
        assert_eq!(sum(Execution::Parallel { threads: 4 }), 50_005_000);
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
