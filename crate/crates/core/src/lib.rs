pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod model;
pub mod node5;
pub mod numerics;
pub mod optim;
pub mod self_training;
pub mod suite;
pub mod train;

pub use error::{Error, Result};
