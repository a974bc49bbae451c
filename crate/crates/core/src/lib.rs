//! Station-level air quality forecasting with dartboard spatial attention,
//! causal windowed temporal attention and a hierarchy of Gaussian latents.

pub mod attention;
pub mod cli;
pub mod dartboard;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod stochastic;

pub use error::{Error, Result};
