pub mod adversary;
pub mod channel;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod extractor;
pub mod generator;
pub mod gradcheck;
pub mod image;
pub mod message;
pub mod model;
pub mod security;
pub mod trainer;

pub use error::{CisError, Result};
