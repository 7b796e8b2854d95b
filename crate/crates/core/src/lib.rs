pub mod corruption;
pub mod diagnostics;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod numeric;
pub mod streams;
pub mod train;

pub use error::{Error, Result};
