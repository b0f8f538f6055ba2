pub mod aggregation;
pub mod attention;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
