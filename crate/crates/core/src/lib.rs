//! Spatio-temporal grid forecasting with per-tile model selection.

pub mod clustering;
pub mod eef;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod harness;
mod linalg;
pub mod predictors;
pub mod representation;
pub mod tiling;

pub use error::{Error, Result};
