pub mod camera;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod plate;
pub mod referencing;
pub mod sim;

pub use error::{Error, ErrorClass, Result};
