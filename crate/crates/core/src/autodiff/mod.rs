//! Reverse-mode automatic differentiation over a recorded tape.

pub(crate) mod ops;
mod tape;

pub use ops::norm::{NormMode, RunningStats, BN_EPSILON, BN_MOMENTUM};
pub use ops::pool::PoolKind;
pub use tape::{Fault, Gradients, Tape, Var};

pub(crate) use tape::{InputGrads, Op};
