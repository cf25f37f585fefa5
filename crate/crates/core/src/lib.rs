pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod params;
pub mod run;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
