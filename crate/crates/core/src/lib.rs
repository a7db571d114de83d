#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod kalman;
pub mod koopman;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor;
