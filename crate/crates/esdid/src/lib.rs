//! Event-study difference-in-differences estimators for complex designs.

pub mod controls;
pub mod design;
pub mod error;
pub mod numeric;
pub mod output;
pub mod panel;
pub mod run;
pub mod sim;

pub mod estimate;
pub mod heterogeneity;
pub mod inference;
pub mod influence;

pub use error::{Error, Result};
