//! Registration of a network of fixed ceiling cameras from a mobile robot.
//!
//! The robot carries an upward-facing fisheye camera, whose odometry gives an
//! unscaled trajectory, and a marker the ceiling cameras detect as a full
//! 6-dof pose. The fisheye camera in turn sees the ceiling cameras as blobs.
//! [`registration::run_pipeline`] turns those measurements into metric camera
//! poses in the odometry frame; [`simulator`] produces the same measurements
//! with ground truth and [`evaluation`] scores the result.

pub mod cli;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod optimizer;
pub mod registration;
pub mod simulator;

pub use geometry::{FisheyeIntrinsics, Pose, Projection, Tangent6, TimedPose, Trajectory};
pub use optimizer::{Problem, RobustLoss, SolveReport, SolverOptions};
pub use registration::{
    run_pipeline, ArucoDetection, BlobDetection, CalibrationResult, CameraEstimate,
    PipelineOptions,
};
pub use simulator::{generate_scenario, Dataset, ScenarioConfig, ScenarioGroundTruth};
