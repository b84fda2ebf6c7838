//! Thread-local floating-point operation counter.
//!
//! Dense kernel loops report their work here at loop-nest granularity; a
//! multiply-add counts as 2 flops. Callers snapshot the counter around an
//! operation to obtain a per-call count.

use std::cell::Cell;

thread_local! {
    static COUNT: Cell<u64> = const { Cell::new(0) };
    static PAUSED: Cell<bool> = const { Cell::new(false) };
}

#[inline]
pub fn add(n: u64) {
    PAUSED.with(|p| {
        if !p.get() {
            COUNT.with(|c| c.set(c.get() + n));
        }
    });
}

/// Multiply-adds convention: one fused multiply-add is 2 flops.
#[inline]
pub fn add_fma(n: u64) {
    add(2 * n);
}

pub fn total() -> u64 {
    COUNT.with(|c| c.get())
}

pub fn reset() {
    COUNT.with(|c| c.set(0));
}

/// Run `f` and return its result together with the flops it recorded.
pub fn counted<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = total();
    let out = f();
    (out, total() - before)
}

/// Run `f` with counting suspended (bookkeeping steps outside an
/// algorithm's published operation count).
pub fn uncounted<R>(f: impl FnOnce() -> R) -> R {
    let prev = PAUSED.with(|p| p.replace(true));
    let out = f();
    PAUSED.with(|p| p.set(prev));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counted_scopes_nest() {
        reset();
        let (_, outer) = counted(|| {
            add_fma(5);
            let (_, inner) = counted(|| add(3));
            assert_eq!(inner, 3);
            uncounted(|| add(1000));
        });
        assert_eq!(outer, 13);
    }
}
