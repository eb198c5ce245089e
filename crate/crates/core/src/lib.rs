pub mod error;
pub mod eval;
pub mod corpus;
pub mod importance;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod selection;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
