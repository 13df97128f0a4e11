pub mod agent;
pub mod controller;
pub mod envs;
pub mod error;
pub mod harness;
pub mod numcore;
pub mod replay;
pub mod rng;

pub use error::{Error, Result};
