pub mod diffcore;
pub mod error;

pub use error::{Error, Result};
pub mod distill;
pub mod frontend;
pub mod rnnt;
pub mod config;
pub mod model;
pub mod eval;
pub mod train;
pub mod pipeline;
pub mod gradsuite;
