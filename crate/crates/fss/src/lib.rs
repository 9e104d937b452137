//! Dataset IO, experiment orchestration and report emission for the few-shot
//! segmentation benchmark. The numerical work lives in `fss-core`.

pub mod emit;
pub mod error;
pub mod io;
pub mod runner;
pub mod spec;

pub use error::{Error, Result};

/// Environment variable that overrides the default results root.
pub const RESULTS_ROOT_ENV: &str = "FSS_RESULTS_ROOT";

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
