pub mod autodiff;
pub mod embeddings;
pub mod episodes;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
