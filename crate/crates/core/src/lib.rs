pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod dictionary;
pub mod error;
pub mod metrics;
pub mod model;
pub mod signal;
pub mod trainer;

pub use error::{Error, Result};
