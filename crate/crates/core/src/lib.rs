//! Modular adapters, routing and training over a frozen toy transformer.

pub mod adapters;
pub mod backbone;
mod error;
pub mod model;
pub mod routing;
pub mod strategies;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
