//! Desk-scale laboratory for positional bias in auto-regressive knowledge
//! fine-tuning on synthetic biographies.

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod model;
pub mod parallel;
pub mod text;
pub mod training;

pub use error::{Error, Result};
