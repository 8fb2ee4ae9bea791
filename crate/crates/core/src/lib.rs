//! Per-sector activation-time (TOS) estimation from circumferential strain
//! matrices with a multi-task CNN, plus the supporting synthetic data,
//! augmentation, active-contour baseline, Grad-CAM and evaluation tooling.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcam;
pub mod model;
pub mod phantom;
pub mod snake;
pub mod strain;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
