pub mod augment;
pub mod error;
pub mod float;
pub mod media;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod signal;
pub mod synth;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use float::Float;
