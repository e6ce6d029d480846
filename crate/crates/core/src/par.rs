//! Data-parallel execution with a sequential fallback.
//!
//! Work is always split into independent items whose results come back in
//! input order, so parallel and sequential runs reduce identically.

/// How independent work items are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is on; otherwise
    /// behaves like `Sequential`.
    #[default]
    Parallel,
}

impl Execution {
    /// True if this build can actually run items concurrently.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<I, T, R, Fn_>(exec: Execution, items: I, f: Fn_) -> Vec<R>
where
    I: IntoIterator<Item = T>,
    T: Send,
    R: Send,
    Fn_: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        let items: Vec<T> = items.into_iter().collect();
        return items.into_par_iter().map(f).collect();
    }
    let _ = exec;
    items.into_iter().map(f).collect()
}
