//! Reverse-mode differentiation, Adam, and the learning-rate schedule.

mod optim;
mod tape;

pub use optim::{AdamState, LrSchedule, Moments};
pub use tape::{dot, sigmoid, Gradients, Tape, Var, NORM_EPS};
