// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod datahub;
pub mod defenselosses;
pub mod error;
pub mod harness;
pub mod infometrics;
pub mod inversion;
pub mod quality;
pub mod splitmodels;

pub use error::{Error, Result};
