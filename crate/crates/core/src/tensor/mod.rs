//! Dense matrices, parameters and the reverse-mode tape.

mod gradcheck;
mod matrix;
mod param;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use matrix::Matrix;
pub use param::{ParamId, ParamSet, Parameter};
pub use tape::{Gradients, OpKind, Tape, Var};
