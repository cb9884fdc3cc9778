// Negated comparisons like `!(x > 0.0)` are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod detector;
pub mod eval;
pub mod frame;
pub mod geometry;
pub mod io;
pub mod optim;
pub mod placement;
pub mod scenegen;
pub mod tensor;
