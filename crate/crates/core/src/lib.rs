pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod model;
pub mod optim;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{EmaFormer, ModelConfig};
pub use tensor::{Tape, Tensor, Var};
