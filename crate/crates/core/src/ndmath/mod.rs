//! Dense matrices, reverse-mode differentiation, and Adam: just enough to
//! train small MLP encoders, the retrieval losses, and attention pooling.

pub mod fastexp;
mod matrix;
mod mlp;
pub mod ops;
mod param;
mod tape;

pub use matrix::{dot, log_sum_exp, Matrix};
pub use mlp::{Layer, Mlp};
pub use ops::{Activation, NORM_FLOOR};
pub use param::{adam_step, glorot_uniform, Adam, ParamId, ParamSet, ParamTensor};
pub(crate) use tape::HingeTerm;
pub use tape::{Gradients, Tape, Var};
