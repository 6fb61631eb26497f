//! Multiply-accumulate counting for forward passes.
//!
//! Layers report the MACs of their dense contractions (convolutions, linear
//! maps, attention matmuls) while a [`count_macs`] scope is active on the
//! current thread. Elementwise ops, normalizations and resampling are not
//! counted, matching the usual profiler convention.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn record(macs: u64) {
    MACS.with(|m| {
        if let Some(v) = m.get() {
            m.set(Some(v + macs));
        }
    });
}

/// Runs `f` and returns its result together with the MACs it recorded.
pub fn count_macs<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let outer = MACS.with(|m| m.replace(Some(0)));
    let out = f();
    let counted = MACS.with(|m| m.replace(outer)).unwrap_or(0);
    if let Some(o) = outer {
        MACS.with(|m| m.set(Some(o + counted)));
    }
    (out, counted)
}
