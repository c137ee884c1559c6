//! Global operation counters used by the benchmark harness.
//!
//! `reductions` counts statistical aggregations: one unit per output element
//! of a mean / variance / sum-of-squares pass (so a per-token mean over a
//! `(B,T,C)` tensor counts `B*T`), plus softmax and cross-entropy row
//! normalizers (two per row: max and sum). Matrix-multiply contractions are
//! not counted; the counter tracks normalization-style statistics only.
//!
//! `elementwise` counts elements written by elementwise kernels, one unit per
//! output element per pass (a fused kernel is one pass).
//!
//! Counters are process-global atomics: increments are one `fetch_add` per
//! kernel call, so totals are deterministic even with parallel callers, but
//! concurrent runs share the tally. Benchmarks reset and read them around a
//! single target.

use std::sync::atomic::{AtomicU64, Ordering};

static REDUCTIONS: AtomicU64 = AtomicU64::new(0);
static ELEMENTWISE: AtomicU64 = AtomicU64::new(0);

pub fn reset() {
    REDUCTIONS.store(0, Ordering::Relaxed);
    ELEMENTWISE.store(0, Ordering::Relaxed);
}

/// (reductions, elementwise) since the last reset.
pub fn read() -> (u64, u64) {
    (
        REDUCTIONS.load(Ordering::Relaxed),
        ELEMENTWISE.load(Ordering::Relaxed),
    )
}

pub(crate) fn count_reductions(n: usize) {
    REDUCTIONS.fetch_add(n as u64, Ordering::Relaxed);
}

pub(crate) fn count_elementwise(n: usize) {
    ELEMENTWISE.fetch_add(n as u64, Ordering::Relaxed);
}
