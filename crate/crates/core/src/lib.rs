#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod control;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod grader;
pub mod linalg;
pub mod planner;
pub mod promp;

pub use error::{Error, ErrorCategory, Result};
