pub mod actuators;
pub mod analysis;
pub mod cache;
pub mod dense;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod presets;
pub mod projections;
pub mod run;
pub mod solver;
pub mod sparse;
pub mod verify;

pub use error::{Error, Result};
