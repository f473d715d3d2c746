//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{gradcheck, gradcheck_coords, relative_error, GradcheckReport};
pub(crate) use ops::sigmoid;
pub use ops::{bce_logit_term, Activation, BinaryKind};
pub use tape::{Backward, BackwardCtx, Tape, Var};
