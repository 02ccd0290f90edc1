pub mod data;
pub mod error;
pub mod evalbench;
pub mod model;
pub mod run;
pub mod tokenize;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use ndarray;
