#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod backend;
pub mod benchmark;
pub mod blur;
pub mod descriptor;
pub mod error;
pub mod image;
pub mod losses;
pub mod model;
pub mod persist;
pub mod pooling;
pub mod resample;
pub mod synthetic;
pub mod tensor;
pub mod whitening;

pub use error::{Error, Result};
pub use image::Image;
