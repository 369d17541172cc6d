pub mod constants;
pub mod dynamics;
pub mod entanglement;
pub mod error;
pub mod fields;
pub mod interferometry;
pub mod output;
pub mod scenario;
pub mod solve;
pub mod units;

pub use error::{Error, Result};
