use serde::{Deserialize, Serialize};

use crate::error::Result;

/// How per-party work inside a step is scheduled. Results are identical in
/// both modes: aggregation always sums in party-id order after the barrier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    #[default]
    Sequential,
    /// Parties run on the rayon pool; needs the `parallel` feature and
    /// falls back to sequential without it.
    Concurrent,
}

/// Applies `f` to every item, preserving order in the output.
pub(crate) fn map_items<T, U, F>(items: &mut [T], exec: Execution, f: F) -> Result<Vec<U>>
where
    T: Send,
    U: Send,
    F: Fn(&mut T) -> Result<U> + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Concurrent => {
            use rayon::prelude::*;
            items.par_iter_mut().map(f).collect()
        }
        _ => items.iter_mut().map(f).collect(),
    }
}

/// Read-only variant of [`map_items`].
pub(crate) fn map_refs<T, U, F>(items: &[T], exec: Execution, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Concurrent => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}
