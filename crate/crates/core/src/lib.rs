pub mod assignment;
pub mod baselines;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synthdata;
pub mod tape;
pub mod tracker;
pub mod trainer;

pub use error::{MatrError, Result};
