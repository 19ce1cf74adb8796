pub mod datasets;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod harness;
pub mod losses;
pub mod meta;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod strength;

pub use error::{Error, Result};
