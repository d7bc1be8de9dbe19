//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (on by default) [`Execution::Parallel`] runs on
//! the rayon pool; without it, it degrades to the sequential loop. Results are
//! always returned in index order, so output never depends on scheduling.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when this build can actually run in parallel.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// `(0..n).map(f)` collected in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Maps over a slice, preserving order.
pub fn map_slice<S, T, F>(exec: Execution, items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_indexed(exec, items.len(), |i| f(&items[i]))
}

/// Pairwise (tree) reduction in index order. The association pattern only
/// depends on `items.len()`, so sums are reproducible bit for bit.
pub fn pairwise_reduce<T: Clone>(items: &[T], combine: &impl Fn(&T, &T) -> T) -> Option<T> {
    match items.len() {
        0 => None,
        1 => Some(items[0].clone()),
        n => {
            let (l, r) = items.split_at(n / 2);
            let a = pairwise_reduce(l, combine)?;
            let b = pairwise_reduce(r, combine)?;
            Some(combine(&a, &b))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree() {
        let seq = map_indexed(Execution::Sequential, 100, |i| (i as f64).sqrt());
        let par = map_indexed(Execution::Parallel, 100, |i| (i as f64).sqrt());
        assert_eq!(seq, par);
    }

    #[test]
    fn pairwise_sum() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(pairwise_reduce(&xs, &|a, b| a + b), Some(55.0));
        assert_eq!(pairwise_reduce::<f64>(&[], &|a, b| a + b), None);
    }
}
