// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod classic_hp;
pub mod data;
pub mod error;
pub mod eval;
pub mod intensity;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};
