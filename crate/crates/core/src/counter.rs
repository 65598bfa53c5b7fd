//! Instrumented operation counter.
//!
//! Each forward kernel tallies the arithmetic it performs on the calling
//! thread: multiply-accumulates of convolutions and token matrix products
//! go to `macs`, every other add/multiply/compare/divide to `flops`.
//! Counting is off unless a [`measure`] scope is active on the thread.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub macs: u64,
    pub flops: u64,
}

impl OpCounts {
    /// FLOPs with one multiply-accumulate counted as two operations.
    pub fn total_flops(&self) -> u64 {
        2 * self.macs + self.flops
    }
}

thread_local! {
    static COUNTS: Cell<Option<OpCounts>> = const { Cell::new(None) };
}

/// Runs `f` and returns what the kernels it invoked on this thread counted.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, OpCounts) {
    let prev = COUNTS.with(|c| c.replace(Some(OpCounts::default())));
    let out = f();
    let counted = COUNTS.with(|c| c.replace(prev)).unwrap_or_default();
    if let Some(mut outer) = prev {
        outer.macs += counted.macs;
        outer.flops += counted.flops;
        COUNTS.with(|c| c.set(Some(outer)));
    }
    (out, counted)
}

/// Runs `f` with counting suspended on this thread.
pub(crate) fn uncounted<R>(f: impl FnOnce() -> R) -> R {
    let prev = COUNTS.with(|c| c.replace(None));
    let out = f();
    COUNTS.with(|c| c.set(prev));
    out
}

pub(crate) fn add_flops(n: usize) {
    COUNTS.with(|c| {
        if let Some(mut k) = c.get() {
            k.flops += n as u64;
            c.set(Some(k));
        }
    });
}

pub(crate) fn add_macs(n: usize) {
    COUNTS.with(|c| {
        if let Some(mut k) = c.get() {
            k.macs += n as u64;
            c.set(Some(k));
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_scopes_accumulate_outward() {
        let (_, outer) = measure(|| {
            add_flops(3);
            let (_, inner) = measure(|| add_macs(5));
            assert_eq!(inner, OpCounts { macs: 5, flops: 0 });
        });
        assert_eq!(outer, OpCounts { macs: 5, flops: 3 });
        assert_eq!(outer.total_flops(), 13);
    }

    #[test]
    fn idle_when_not_measuring() {
        add_flops(10);
        let (_, k) = measure(|| ());
        assert_eq!(k, OpCounts::default());
    }
}
