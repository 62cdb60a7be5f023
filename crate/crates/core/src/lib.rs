// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod geo;
pub mod io;
pub mod losses;
pub mod mining;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
