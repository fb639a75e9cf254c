pub mod cli;
pub mod demos;
pub mod density;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod policy;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
