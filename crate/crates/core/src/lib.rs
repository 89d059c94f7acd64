pub mod autodiff;
pub mod corpus;
pub mod decoder;
pub mod encoder;
mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod nn;
pub mod params;
pub mod training;

pub use error::{Error, Result};
