//! Signed distance fields from sparse, unoriented point clouds.
//!
//! A small network maps a unit square onto a dense surface chart, and a
//! thin plate spline over learned point features defines the distance field.
//! Everything is generic over the scalar type; the aliases below fix `f64`.

pub mod autodiff;
mod error;
pub mod field_extract;
pub mod geometry;
pub mod io;
pub mod neural_tps;
pub mod pipeline;
mod scalar;
pub mod surface_param;
pub mod trainer;
pub mod synthetic;

pub use error::{Error, Result};
pub use scalar::Real;

pub type PointCloud = geometry::PointCloud<f64>;
pub type TriangleMesh = geometry::TriangleMesh<f64>;
pub type Polylines = geometry::Polylines<f64>;
