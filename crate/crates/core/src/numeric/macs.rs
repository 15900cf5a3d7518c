//! Instrumented multiply-add counting.
//!
//! Forward ops charge the number of scalar multiplications they perform to
//! a thread-local counter. Additions, exponentials and comparisons are free.
//! The analytic cost model in [`crate::costmodel`] follows the same
//! convention, so the two can be compared directly.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

pub(crate) fn charge(n: usize) {
    COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n as u64));
        }
    });
}

/// Runs `f` with counting enabled and returns its result with the number of
/// multiply-adds it charged. Nested calls are not supported.
pub fn count_macs<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let prev = COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let n = COUNTER.with(|c| c.replace(prev)).unwrap_or(0);
    (out, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_only_inside_scope() {
        charge(5);
        let ((), n) = count_macs(|| {
            charge(3);
            charge(4);
        });
        assert_eq!(n, 7);
    }
}
