//! shuttleNet: a recurrent layer built from N loop-connected, weight-shared
//! gated processors with an N x D grid of standalone hidden states and an
//! attention-based pathway selector, plus the training and task harnesses
//! needed to exercise it end to end.

pub mod cells;
pub mod error;
pub mod numerics;
pub mod tasks;
pub mod training;
pub mod reference;
pub mod shuttle;

pub use error::{Error, Result};
pub use numerics::{ParamStore, Tape, Tensor, ValueId};
pub use shuttle::{ShuttleConfig, ShuttleNet, StateGrid};
