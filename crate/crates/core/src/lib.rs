//! Crowding experiments for standard deep convolutional networks and the
//! eccentricity-dependent multi-scale model.

pub mod checks;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod image;
pub mod lab;
pub mod models;
pub mod plot;
pub mod pyramid;
pub mod stimulus;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
