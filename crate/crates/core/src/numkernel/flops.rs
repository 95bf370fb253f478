//! Floating-point operation accounting.
//!
//! Every matrix product reports `2·m·k·n` operations to a process-wide atomic
//! counter and to a per-thread counter. The global counter never loses
//! concurrent increments; the per-thread counter lets a caller attribute work
//! to a region of code even when other threads are multiplying matrices at the
//! same time (the profiler relies on this).

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

static GLOBAL: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static LOCAL: Cell<u64> = const { Cell::new(0) };
}

/// Cost of an `m×k` by `k×n` product.
#[inline]
pub const fn matmul_flops(m: usize, k: usize, n: usize) -> u64 {
    2 * (m as u64) * (k as u64) * (n as u64)
}

pub(crate) fn record(n: u64) {
    GLOBAL.fetch_add(n, Ordering::Relaxed);
    LOCAL.with(|c| c.set(c.get() + n));
}

/// Credits work done on helper threads to the calling thread's counter.
/// The global counter has already seen these operations.
pub(crate) fn credit_local(n: u64) {
    LOCAL.with(|c| c.set(c.get() + n));
}

/// Runs `f`, which returns its total cost wherever it ran (rayon may run
/// some or all of it on this thread), and credits the caller with the part
/// its own counter has not seen yet.
pub(crate) fn credit_parallel(f: impl FnOnce() -> u64) -> u64 {
    let before = local_count();
    let total = f();
    let seen = local_count() - before;
    credit_local(total - seen);
    total
}

/// Total operations recorded by every thread since process start.
pub fn global_count() -> u64 {
    GLOBAL.load(Ordering::Relaxed)
}

/// Operations recorded on the current thread since it started.
pub fn local_count() -> u64 {
    LOCAL.with(|c| c.get())
}

/// Measures the operations the current thread performs inside `f`.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = local_count();
    let out = f();
    (out, local_count() - before)
}
