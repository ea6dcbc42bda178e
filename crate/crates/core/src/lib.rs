//! Self-supervised image-to-region similarity training for retrieval-based
//! geo-localization, on a procedurally generated street.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mining;
pub mod model;
pub mod regions;
pub mod supervision;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vlad;

pub use error::{Error, Result};
