// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod numcore;
pub mod parallel;
pub mod propensity;
pub mod training;

pub use error::{Error, Result};
