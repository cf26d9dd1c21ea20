//! Data-parallel map helpers with a sequential fallback.
//!
//! The hot loops in this crate (phantom generation, per-sample gradient
//! evaluation, batch feature extraction, grid sweeps) are embarrassingly
//! parallel over independent items. They all funnel through [`map`], which
//! uses rayon when the `parallel` feature is enabled (the default) and plain
//! iteration otherwise. Results are collected in input order, so the numeric
//! output is identical on both paths and for any thread count.
//!
//! A process-wide switch ([`set_sequential`]) lets benchmarks and the CLI
//! force the sequential path at runtime without recompiling.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential path even when compiled with the `parallel` feature.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

/// True when [`map`] would currently run sequentially.
pub fn is_sequential() -> bool {
    cfg!(not(feature = "parallel")) || FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// Sequential map, collected in order.
pub fn map_seq<T, U>(items: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Rayon map, collected in order.
#[cfg(feature = "parallel")]
pub fn map_par<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Send + Sync) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Map over independent items, parallel when available.
pub fn map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Send + Sync) -> Vec<U> {
    #[cfg(feature = "parallel")]
    {
        if !FORCE_SEQUENTIAL.load(Ordering::Relaxed) {
            return map_par(items, f);
        }
    }
    map_seq(items, f)
}

/// Map over an index range, parallel when available.
pub fn map_range<U: Send>(n: usize, f: impl Fn(usize) -> U + Send + Sync) -> Vec<U> {
    let idx: Vec<usize> = (0..n).collect();
    map(&idx, |i| f(*i))
}
