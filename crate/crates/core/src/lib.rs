// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod control_encoder;
pub mod evaluation;
pub mod harness;
pub mod model;
pub mod numerics;
mod params;
pub mod taskgen;
pub mod thought_bank;
pub mod training;
