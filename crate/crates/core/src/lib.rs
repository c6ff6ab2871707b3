#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod error;
pub mod gaussian;
pub mod io;
pub mod losses;
pub mod numeric;
pub mod render;
pub mod rig;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
