// Negated float comparisons are used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cdc;
pub mod cdc_pipeline;
pub mod channel;
pub mod error;
pub mod generator;
pub mod harness;
pub mod image;
pub mod inversion;
pub mod numerics;
pub mod objective;

pub use error::{Error, Result};
