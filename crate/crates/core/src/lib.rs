pub mod deq;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod meter;
pub mod models;
pub mod rev;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
