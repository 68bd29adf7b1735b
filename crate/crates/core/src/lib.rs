pub mod datagen;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod povm;
pub mod quantum;
pub mod training;

pub use error::{Error, Result};
