//! Continuous space-time video super-resolution.
//!
//! Two low-resolution frames are encoded into a feature grid; a spatial
//! implicit function turns the grid into a continuous feature field, a
//! temporal implicit function predicts motion flows at any time, and a
//! decoder maps flow-warped features to RGB at any space-time coordinate.

pub mod data;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod renderer;
pub mod spatial_inr;
pub mod trainer;
pub mod temporal_inr;
pub mod numerics;

pub use error::{Error, Result};
