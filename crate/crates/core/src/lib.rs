pub mod canonical;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod numerics;
pub mod network;
pub mod optlab;
pub mod oracles;
pub mod theory;

pub use error::{Error, Result};
