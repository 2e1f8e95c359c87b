//! Strategy execution, evaluation protocols and distractor forging on top
//! of the core kernels and the provider clients.

pub mod context;
pub mod error;
pub mod evaluation;
pub mod forge;
pub mod prompts;
pub mod strategy;
pub mod util;

pub use error::{EngineError, Result};
