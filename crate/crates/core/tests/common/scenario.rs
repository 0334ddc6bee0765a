#![allow(dead_code)]

//! Simulated scenarios and ground-truth comparisons.

use camreg::registration::{run_pipeline, CalibrationResult, CameraEstimate, PipelineOptions};
use camreg::simulator::NoiseConfig;
use camreg::{generate_scenario, Dataset, Pose, ScenarioConfig, ScenarioGroundTruth};

/// A dozen cameras over a 15 m x 9 m room; quick enough for many runs.
pub fn small(noise: NoiseConfig) -> ScenarioConfig {
    ScenarioConfig {
        n_cameras: 12,
        area: [15.0, 9.0],
        noise,
        ..ScenarioConfig::default()
    }
}

pub fn small_zero_noise() -> ScenarioConfig {
    small(NoiseConfig::zero())
}

pub fn generate(cfg: &ScenarioConfig) -> (ScenarioGroundTruth, Dataset) {
    generate_scenario(cfg).expect("valid config")
}

pub fn calibrate(data: &Dataset, opts: &PipelineOptions) -> CalibrationResult {
    run_pipeline(&data.trajectory_unscaled, &data.arucos, &data.blobs, &data.intrinsics, opts)
        .expect("pipeline succeeds")
}

/// Largest (translation m, rotation rad) error of a pose against another.
pub fn pose_error(est: &Pose, truth: &Pose) -> (f64, f64) {
    let translation = (est.translation() - truth.translation()).norm();
    let rotation = est.rotation().angle_to(truth.rotation());
    (translation, rotation)
}

/// Worst camera error against ground truth; every ground-truth camera must
/// be present.
pub fn worst_camera_error(cameras: &[CameraEstimate], gt: &ScenarioGroundTruth) -> (f64, f64) {
    assert_eq!(cameras.len(), gt.camera_poses_world.len(), "cameras missing");
    cameras.iter().fold((0.0f64, 0.0f64), |(t, r), c| {
        let (dt, dr) = pose_error(&c.pose_world, gt.camera(c.camera_id).expect("known camera"));
        (t.max(dt), r.max(dr))
    })
}

/// Offset translation error split into (x, y, z) magnitudes in the fisheye
/// frame.
pub fn offset_axis_errors(est: &Pose, truth: &Pose) -> [f64; 3] {
    let d = est.translation() - truth.translation();
    [d.x.abs(), d.y.abs(), d.z.abs()]
}
