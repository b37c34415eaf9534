pub mod attention;
pub mod autodiff;
pub mod data;
pub mod embedder;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod negatives;
pub mod patches;
pub mod train;

pub use error::{Error, Result};
