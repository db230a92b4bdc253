pub mod apce;
pub mod ccopf;
pub mod error;
pub mod netmodel;
pub mod powerflow;
pub mod scenarios;
pub mod surrogate;

pub use error::{Error, ErrorKind, Result};
