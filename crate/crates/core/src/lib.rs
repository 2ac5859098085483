pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod head;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
