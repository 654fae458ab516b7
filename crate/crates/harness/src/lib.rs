//! Data generation, training, verification, benchmarking and parameter
//! audits for `ssmixer-core`.

pub mod alloc;
pub mod audit;
pub mod bench;
pub mod data;
pub mod error;
pub mod experiment;
pub mod verify;

pub use error::{HarnessError, Result};
