pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod loss;
pub mod model;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
