//! Decoupled perception and policy learning for embodied navigation on
//! procedural raycast worlds.

// validation negates comparisons so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod render;
pub mod train;
pub mod world;

pub use error::{Error, Result};
