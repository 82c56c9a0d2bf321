pub mod error;
pub mod nn;

pub use error::{Error, Result};
pub mod backbone;
pub mod adapter;
pub mod fusion;
pub mod decoder;
pub mod data;
pub mod metrics;
pub mod model;
pub mod config;
pub mod trainer;
