pub mod autodiff;
pub mod batching;
pub mod error;
pub mod exec;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Execution;
