pub mod edt;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod stats;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
