//! Fixed text representations from composable per-task attention prefixes.

pub mod container;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod head;
pub mod nn;
pub mod prefix;
pub mod reps;
pub mod taskgen;
pub mod training;

pub use error::{Error, Result};
