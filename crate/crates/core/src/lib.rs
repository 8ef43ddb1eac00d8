pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod net;
pub mod retrieval;
#[cfg(test)]
mod testutil;
pub mod train;

pub use error::{Error, Result};
