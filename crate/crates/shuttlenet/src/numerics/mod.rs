//! Tensor arithmetic and reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{ParamEntry, ParamStore};
pub use tape::{BatchStats, ElementwiseOp, Tape, ValueId};
pub use tensor::Tensor;
