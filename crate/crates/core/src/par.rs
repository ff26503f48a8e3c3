//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers fan out over rayon's global pool;
//! without it (or after [`set_execution`] selects [`Execution::Sequential`])
//! they run on the calling thread. Output order always matches input order,
//! so reductions performed by callers over the returned vectors are
//! bitwise-identical in both modes.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { 1 } else { 0 });

/// Selects the execution mode for subsequent calls. Requesting
/// `Parallel` in a build without the `parallel` feature is a no-op.
pub fn set_execution(mode: Execution) {
    let value = match mode {
        Execution::Parallel if cfg!(feature = "parallel") => 1,
        _ => 0,
    };
    MODE.store(value, Ordering::Relaxed);
}

pub fn execution() -> Execution {
    if MODE.load(Ordering::Relaxed) == 1 {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if execution() == Execution::Parallel {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if execution() == Execution::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Order-preserving fallible map; the first error in input order wins.
pub fn try_map<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<u64> = (0..1000).collect();
        let out = map(&items, |x| x * 3);
        assert_eq!(out, items.iter().map(|x| x * 3).collect::<Vec<_>>());
        let idx = map_range(17, |i| i * i);
        assert_eq!(idx[16], 256);
    }

    #[test]
    fn try_map_reports_first_error() {
        let items = vec![1, 2, 3, 4];
        let out: Result<Vec<i32>, i32> = try_map(&items, |&x| if x >= 3 { Err(x) } else { Ok(x) });
        assert_eq!(out, Err(3));
    }
}
