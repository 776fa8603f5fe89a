pub mod backbone;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod mcrm;
pub mod model;
pub mod nn;
pub mod ssfm;

pub use error::{Result, SemcError};
