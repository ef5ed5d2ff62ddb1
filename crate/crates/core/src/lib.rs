//! HyA-T: hyperspectral adapters (HEI, HAS, HAM) grafted onto a small frozen
//! transformer tracker, with training, tracking and evaluation machinery.

pub mod adapters;
pub mod autograd;
pub mod backbone;
pub mod config;
pub mod error;
pub mod head;
pub mod hei;
pub mod harness;
pub mod hsdata;
pub mod model;
pub mod tensor;
pub mod tracker;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Matrix;
