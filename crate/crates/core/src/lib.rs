//! Spatio-temporal contrastive learning for dynamic connectivity.

pub mod app;
pub mod autograd;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod io;
pub mod model;
pub mod nn;
pub mod objective;
pub mod segfc;
pub mod structgen;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
