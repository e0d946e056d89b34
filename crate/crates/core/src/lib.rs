//! Implicit road-surface fields: height, color and semantics over the ground plane.

pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod geometry;
pub mod io;
pub mod network;
pub mod raster;
pub mod supervision;
pub mod synthetic;
pub mod training;
pub mod util;

pub use error::{Error, Result};
