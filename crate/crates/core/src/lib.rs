pub mod autograd;
pub mod config;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod lorentz;
pub mod objectives;
pub mod peft;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
