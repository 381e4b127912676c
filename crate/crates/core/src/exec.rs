//! Execution mode for the data-parallel loops.
//!
//! With the `parallel` feature (default) [`ExecMode::Parallel`] runs on the rayon
//! pool. Without it every mode runs sequentially, so callers never need to
//! branch on the feature themselves.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

/// Order-preserving map over a slice.
pub fn map_slice<T, U, F>(mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<U, F>(mode: ExecMode, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let items: Vec<u64> = (0..5000).collect();
        let a = map_slice(ExecMode::Sequential, &items, |v| v * v);
        let b = map_slice(ExecMode::Parallel, &items, |v| v * v);
        assert_eq!(a, b);
        assert_eq!(
            map_range(ExecMode::Sequential, 100, |i| i * 3),
            map_range(ExecMode::Parallel, 100, |i| i * 3)
        );
    }
}
