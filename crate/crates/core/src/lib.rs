pub mod device;
pub mod error;
pub mod metrics;
pub mod optimize;
pub mod propagate;
pub mod pulse;

pub use error::{Error, Result};
