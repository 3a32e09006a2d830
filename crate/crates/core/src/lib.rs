// negated float comparisons deliberately reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod regression;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
