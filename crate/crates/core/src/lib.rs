//! Minimum effective dose estimation with target-dose weighted regression.

pub mod error;
pub mod fitting;
pub mod intervals;
pub mod irwls;
mod linalg;
pub mod mcpmod;
pub mod med;
pub mod models;
pub mod robust;
pub mod simlab;
pub mod weights;

pub use error::{Error, Result};
