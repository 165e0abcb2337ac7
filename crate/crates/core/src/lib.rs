pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod masking;
pub mod model;
pub mod pipeline;
pub mod probe;
pub mod seeding;

pub use error::{Error, Result};
