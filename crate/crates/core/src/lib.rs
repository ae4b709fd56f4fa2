//! LiDAR–camera extrinsic calibration from plane observations of a
//! checkerboard target.
//!
//! The pipeline extracts one plane per sensor for every target placement
//! ([`target`]), then estimates the camera-from-LiDAR transform by robust
//! Gauss-Newton on a plane-to-plane residual ([`solver`]). [`synth`] provides a
//! simulated rig with ground truth for evaluation, and [`io`] the file formats.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geom;
pub mod io;
pub mod projection;
pub mod solver;
pub mod synth;
pub mod target;

pub use geom::{Plane, PlaneError, Pose, Twist};
pub use projection::{CameraIntrinsics, LidarProjectionParams, PointCloud, RangeImage};
pub use solver::{CalibrationReport, MeasurementPair, SolverConfig};
pub use target::{BoardSpec, CornerSet, PlaneObservation, RansacConfig};
