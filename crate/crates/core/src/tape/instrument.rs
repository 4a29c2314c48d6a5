//! Thread-local instrumentation for the tape.
//!
//! Tracks three things the rest of the crate relies on:
//! - whether gradient recording is enabled (`no_grad` scopes),
//! - denoiser call scopes, so a graph traversal can count how many denoiser
//!   computations are still attached to a loss (the retained-graph count),
//! - a live/peak gauge of scoped tensor elements, the memory proxy reported
//!   by the profiler.

use std::cell::Cell;

thread_local! {
    static NEXT_NODE_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static CURRENT_SCOPE: Cell<Option<u64>> = const { Cell::new(None) };
    static NEXT_SCOPE_ID: Cell<u64> = const { Cell::new(1) };
    static LIVE_SCOPED_ELEMS: Cell<usize> = const { Cell::new(0) };
    static PEAK_SCOPED_ELEMS: Cell<usize> = const { Cell::new(0) };
    static RAW_FORWARDS: Cell<u64> = const { Cell::new(0) };
    static GUIDED_PREDICTIONS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn next_node_id() -> u64 {
    NEXT_NODE_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Run `f` with gradient recording disabled; restores the previous state.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

pub(crate) fn current_scope() -> Option<u64> {
    CURRENT_SCOPE.with(Cell::get)
}

/// Marks every tensor created while alive as belonging to one denoiser
/// computation. One scope per guided noise prediction (a cfg pair counts
/// once: it is one sampling-step computation).
pub struct DenoiserScope {
    prev: Option<u64>,
}

impl DenoiserScope {
    pub fn enter() -> Self {
        let id = NEXT_SCOPE_ID.with(|c| {
            let id = c.get();
            c.set(id + 1);
            id
        });
        let prev = CURRENT_SCOPE.with(|c| c.replace(Some(id)));
        DenoiserScope { prev }
    }
}

impl Drop for DenoiserScope {
    fn drop(&mut self) {
        CURRENT_SCOPE.with(|c| c.set(self.prev));
    }
}

pub(crate) fn scoped_alloc(numel: usize) {
    LIVE_SCOPED_ELEMS.with(|c| {
        let live = c.get() + numel;
        c.set(live);
        PEAK_SCOPED_ELEMS.with(|p| {
            if live > p.get() {
                p.set(live);
            }
        });
    });
}

pub(crate) fn scoped_free(numel: usize) {
    LIVE_SCOPED_ELEMS.with(|c| c.set(c.get().saturating_sub(numel)));
}

pub fn live_scoped_elements() -> usize {
    LIVE_SCOPED_ELEMS.with(Cell::get)
}

/// Reset and later read the peak scoped-element gauge.
pub fn reset_peak_scoped_elements() {
    PEAK_SCOPED_ELEMS.with(|p| p.set(LIVE_SCOPED_ELEMS.with(Cell::get)));
}

pub fn peak_scoped_elements() -> usize {
    PEAK_SCOPED_ELEMS.with(Cell::get)
}

pub fn count_raw_forward() {
    RAW_FORWARDS.with(|c| c.set(c.get() + 1));
}

pub fn count_guided_prediction() {
    GUIDED_PREDICTIONS.with(|c| c.set(c.get() + 1));
}

/// Snapshot of the denoiser call counters, used as a diff guard in tests and
/// in the profiler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallCounts {
    pub raw_forwards: u64,
    pub guided_predictions: u64,
}

pub fn call_counts() -> CallCounts {
    CallCounts {
        raw_forwards: RAW_FORWARDS.with(Cell::get),
        guided_predictions: GUIDED_PREDICTIONS.with(Cell::get),
    }
}

impl CallCounts {
    pub fn since(&self, earlier: &CallCounts) -> CallCounts {
        CallCounts {
            raw_forwards: self.raw_forwards - earlier.raw_forwards,
            guided_predictions: self.guided_predictions - earlier.guided_predictions,
        }
    }
}
