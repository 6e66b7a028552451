//! Small reverse-mode differentiation engine over `f64` tensors, with the
//! Adam optimizer and seeded random streams used by training.

mod adam;
pub mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use rng::Rng;
pub use tape::{cosine_raw, Tape, Var, NORM_EPS};
pub use tensor::Tensor;
