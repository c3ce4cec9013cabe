//! Per-thread instrumentation: live `Matrix` element accounting and a
//! multiply-add counter.
//!
//! Both counters are thread-local. A measured scope only sees work done on
//! the calling thread, so measurements must run with per-window parallelism
//! disabled (the default thread count is one).

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<i64> = const { Cell::new(0) };
    static HIGH: Cell<i64> = const { Cell::new(0) };
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn on_alloc(elements: usize) {
    LIVE.with(|live| {
        let now = live.get() + elements as i64;
        live.set(now);
        HIGH.with(|high| {
            if now > high.get() {
                high.set(now);
            }
        });
    });
}

pub(crate) fn on_free(elements: usize) {
    LIVE.with(|live| live.set(live.get() - elements as i64));
}

pub(crate) fn count_macs(n: usize) {
    MACS.with(|m| m.set(m.get().wrapping_add(n as u64)));
}

/// Snapshot of the element meter for the current thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocMeter {
    pub live_elements: i64,
    pub high_water: i64,
}

impl AllocMeter {
    pub fn current() -> Self {
        AllocMeter {
            live_elements: LIVE.with(Cell::get),
            high_water: HIGH.with(Cell::get),
        }
    }

    /// Runs `body` with the high-water mark reset to the current live count
    /// and returns the peak number of simultaneously live matrix elements
    /// allocated inside it. Scopes nest.
    pub fn scope<R>(body: impl FnOnce() -> R) -> (R, usize) {
        let baseline = LIVE.with(Cell::get);
        let outer_high = HIGH.with(|h| h.replace(baseline));
        let out = body();
        let inner_high = HIGH.with(Cell::get);
        HIGH.with(|h| h.set(outer_high.max(inner_high)));
        (out, (inner_high - baseline).max(0) as usize)
    }
}

/// Multiply-add counter. Dense products count `m·k·n`; attention kernels
/// count one per scalar product term.
pub struct FlopMeter;

impl FlopMeter {
    pub fn scope<R>(body: impl FnOnce() -> R) -> (R, u64) {
        let before = MACS.with(Cell::get);
        let out = body();
        let after = MACS.with(Cell::get);
        (out, after.wrapping_sub(before))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Matrix;

    #[test]
    fn sequential_allocations_peak_at_largest() {
        let ((), peak) = AllocMeter::scope(|| {
            let a = Matrix::zeros(4, 4);
            drop(a);
            let _b = Matrix::zeros(2, 2);
        });
        assert_eq!(peak, 16);
    }

    #[test]
    fn simultaneous_allocations_sum() {
        let ((), peak) = AllocMeter::scope(|| {
            let _a = Matrix::zeros(4, 4);
            let _b = Matrix::zeros(2, 2);
        });
        assert_eq!(peak, 20);
    }

    #[test]
    fn preexisting_matrices_do_not_count() {
        let outer = Matrix::zeros(10, 10);
        let ((), peak) = AllocMeter::scope(|| {
            let _c = outer.clone();
        });
        assert_eq!(peak, 100);
        let ((), peak) = AllocMeter::scope(|| {});
        assert_eq!(peak, 0);
    }

    #[test]
    fn nested_scopes_propagate_high_water() {
        let ((), outer) = AllocMeter::scope(|| {
            let ((), inner) = AllocMeter::scope(|| {
                let _a = Matrix::zeros(3, 3);
            });
            assert_eq!(inner, 9);
            let _b = Matrix::zeros(1, 2);
        });
        assert_eq!(outer, 9);
        let m = AllocMeter::current();
        assert!(m.high_water >= m.live_elements);
    }

    #[test]
    fn flop_meter_counts_matmul() {
        let a = Matrix::zeros(3, 4);
        let b = Matrix::zeros(4, 5);
        let (_, macs) = FlopMeter::scope(|| crate::matmul(&a, &b).unwrap());
        assert_eq!(macs, 60);
    }
}
