//! Per-thread call counters for the optional loss paths.
//!
//! The ablation grid relies on zero-weight terms never being built. These
//! counters let tests and reports observe that directly.

use std::cell::Cell;
use std::ops::Sub;

use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Calls to `losses::similarity_matrix`, including prototype similarity.
    pub similarity: u64,
    /// Calls to `prototypes::dirichlet_alpha`.
    pub prototype: u64,
    /// Calls to `BoundModel::head_forward_from_layer`.
    pub injection: u64,
}

impl Sub for Counters {
    type Output = Counters;

    fn sub(self, rhs: Counters) -> Counters {
        Counters {
            similarity: self.similarity - rhs.similarity,
            prototype: self.prototype - rhs.prototype,
            injection: self.injection - rhs.injection,
        }
    }
}

thread_local! {
    static COUNTERS: Cell<Counters> = const { Cell::new(Counters { similarity: 0, prototype: 0, injection: 0 }) };
}

pub fn snapshot() -> Counters {
    COUNTERS.with(Cell::get)
}

fn bump(f: impl FnOnce(&mut Counters)) {
    COUNTERS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

pub(crate) fn similarity() {
    bump(|c| c.similarity += 1);
}

pub(crate) fn prototype() {
    bump(|c| c.prototype += 1);
}

pub(crate) fn injection() {
    bump(|c| c.injection += 1);
}
