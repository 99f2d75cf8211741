pub mod config;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod feature_extractor;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
