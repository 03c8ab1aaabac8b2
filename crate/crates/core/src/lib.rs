// `!(x > 0.0)` is the NaN-rejecting form used throughout validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod feature_queue;
pub mod losses;
pub mod ndmath;
pub mod par;
pub mod retrieval_eval;
pub mod rng;
pub mod sinkhorn;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, FormatError, Result};
