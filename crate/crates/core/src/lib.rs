pub mod binio;
pub mod config;
pub mod evalkit;
pub mod error;
pub mod featurize;
pub mod model;
pub mod numcore;
pub mod stdata;
pub mod trainer;

pub use error::{Error, Result};
