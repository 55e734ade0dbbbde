pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck_suite;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod pseudo_label;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Label value excluded from losses, memory updates and metrics.
pub const VOID: u8 = 255;
