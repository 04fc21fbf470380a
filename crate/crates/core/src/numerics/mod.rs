//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! Every forward primitive records a node on a [`Tape`]; [`Tape::backward`]
//! replays the record in reverse and adds parameter gradients into a
//! [`ParamStore`]. Gradients accumulate until [`ParamStore::zero_grad`].

mod params;
mod tape;
mod tensor;

pub mod gradcheck;


pub use params::{Param, ParamId, ParamStore};
pub use tape::{gelu, sigmoid, GradMode, Tape, Var};
pub use tensor::Tensor;

/// Thread-local multiply-accumulate counter fed by forward matrix products.
///
/// Backward products are not counted.
pub mod macs {
    use std::cell::Cell;

    thread_local! {
        static COUNT: Cell<u64> = const { Cell::new(0) };
    }

    pub fn reset() {
        COUNT.with(|c| c.set(0));
    }

    pub fn get() -> u64 {
        COUNT.with(|c| c.get())
    }

    pub(crate) fn add(n: u64) {
        COUNT.with(|c| c.set(c.get() + n));
    }

    /// Runs `f` and returns its result with the number of MACs it executed.
    pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
        let before = get();
        let out = f();
        (out, get() - before)
    }
}
