pub mod data;
pub mod error;
pub mod fed;
pub mod harness;
pub mod model;
pub mod par;
pub mod phy;
pub mod quant;
pub mod seed;

pub use error::{Error, Result};
