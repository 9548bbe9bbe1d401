pub mod data;
pub mod error;
pub mod eval;
pub mod grounding;
pub mod linalg;
pub mod persist;
pub mod pretrain;
pub mod token_init;
pub mod trainer;
pub mod vision;
pub mod vlm;

pub use error::{Error, Result};
