//! Estimation and diagnostics for leniency (examiner/judge) instrumental-variable designs.

pub mod checklist;
pub mod data;
pub mod design;
pub mod error;
pub mod estimate;
pub mod inference;
pub mod sim;

pub use error::{Error, Result};
