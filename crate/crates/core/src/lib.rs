#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchors;
pub mod attention;
pub mod cli;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod inception;
pub mod params;
pub mod tensor;
pub mod toolkit;
pub mod verify;

pub use error::{Error, Result};
