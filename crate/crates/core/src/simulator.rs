//! Synthetic scenarios with ground truth.
//!
//! Ceiling cameras are placed looking down on a jittered grid; the robot
//! drives a smoothed serpentine loop under the camera rows. From that ground
//! truth the generator emits what the real system would record: an unscaled
//! keyframe trajectory, marker detections from the ceiling cameras and blob
//! detections of the cameras in the upward fisheye image.
//!
//! The continuous ground-truth motion between keyframes is defined by the
//! same interpolation the pipeline uses, so zero-noise data is exactly
//! consistent.

use std::f64::consts::{PI, TAU};

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{FisheyeIntrinsics, Pose, TimedPose, Trajectory};
use crate::registration::{ArucoDetection, BlobDetection};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid config: {field}: {message}")]
pub struct InvalidConfig {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    /// Closed loop of (x, y) waypoints in meters. Empty: serpentine along the
    /// camera rows.
    pub waypoints: Vec<[f64; 2]>,
    /// m/s
    pub speed: f64,
    /// Hz
    pub keyframe_rate: f64,
    /// Amplitude of the sinusoidal roll and pitch, radians. Zero gives purely
    /// planar motion.
    pub roll_pitch_excitation: f64,
    /// Height of the fisheye camera above the floor, meters.
    pub robot_height: f64,
    /// Corner rounding window, meters.
    pub smoothing: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            waypoints: Vec::new(),
            speed: 0.5,
            keyframe_rate: 4.0,
            roll_pitch_excitation: 0.05,
            robot_height: 0.3,
            smoothing: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub aruco_trans_sigma: f64,
    pub aruco_rot_sigma: f64,
    pub blob_pixel_sigma: f64,
    pub timestamp_jitter_sigma: f64,
    pub outlier_fraction: f64,
    /// Independent per-keyframe odometry noise, off by default.
    pub vo_trans_sigma: f64,
    pub vo_rot_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            aruco_trans_sigma: 0.005,
            aruco_rot_sigma: 0.5f64.to_radians(),
            blob_pixel_sigma: 1.0,
            timestamp_jitter_sigma: 0.0015,
            outlier_fraction: 0.01,
            vo_trans_sigma: 0.0,
            vo_rot_sigma: 0.0,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            aruco_trans_sigma: 0.0,
            aruco_rot_sigma: 0.0,
            blob_pixel_sigma: 0.0,
            timestamp_jitter_sigma: 0.0,
            outlier_fraction: 0.0,
            vo_trans_sigma: 0.0,
            vo_rot_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_cameras: usize,
    /// (min, max) camera height, meters.
    pub ceiling_height_range: [f64; 2],
    /// (x, y) extent of the camera grid, meters.
    pub area: [f64; 2],
    /// Uniform jitter of grid positions, meters.
    pub grid_jitter: f64,
    /// Max tilt of a camera away from straight down, radians.
    pub camera_tilt: f64,
    pub trajectory: TrajectoryConfig,
    /// Odometry units per meter are `1 / true_scale`.
    pub true_scale: f64,
    /// `T_f_m`
    pub true_offset: Pose,
    pub aruco_fov_half_angle: f64,
    pub intrinsics: FisheyeIntrinsics,
    pub noise: NoiseConfig,
    /// Layout of cameras.
    pub seed: u64,
    /// Measurement noise; defaults to `seed`.
    pub measurement_seed: Option<u64>,
}

impl Default for ScenarioConfig {
    /// About 40 cameras over 800 m^2 under a 3-4 m ceiling.
    fn default() -> Self {
        Self {
            n_cameras: 40,
            ceiling_height_range: [3.0, 4.0],
            area: [40.0, 20.0],
            grid_jitter: 0.3,
            camera_tilt: 3f64.to_radians(),
            trajectory: TrajectoryConfig::default(),
            true_scale: 2.5,
            true_offset: Pose::from_rpy(0.03, -0.02, 0.35, Vector3::new(0.12, -0.08, 0.25)),
            aruco_fov_half_angle: 35f64.to_radians(),
            intrinsics: FisheyeIntrinsics::default(),
            noise: NoiseConfig::default(),
            seed: 7,
            measurement_seed: None,
        }
    }
}

impl ScenarioConfig {
    pub fn zero_noise() -> Self {
        Self {
            noise: NoiseConfig::zero(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), InvalidConfig> {
        let fail = |field: &str, message: String| {
            Err(InvalidConfig {
                field: field.to_string(),
                message,
            })
        };
        if self.n_cameras < 1 {
            return fail("n_cameras", "must be >= 1".into());
        }
        let [hmin, hmax] = self.ceiling_height_range;
        if !(hmin.is_finite() && hmax.is_finite() && hmin <= hmax) {
            return fail("ceiling_height_range", format!("invalid range [{hmin}, {hmax}]"));
        }
        if hmin <= self.trajectory.robot_height {
            return fail("ceiling_height_range", "ceiling must be above the robot".into());
        }
        if !(self.area[0] > 0.0 && self.area[1] > 0.0) {
            return fail("area", format!("extents must be positive, got {:?}", self.area));
        }
        if !(self.true_scale > 0.0 && self.true_scale.is_finite()) {
            return fail("true_scale", format!("must be > 0, got {}", self.true_scale));
        }
        let t = &self.trajectory;
        if !(t.speed > 0.0) {
            return fail("trajectory.speed", format!("must be > 0, got {}", t.speed));
        }
        if !(t.keyframe_rate > 0.0) {
            return fail("trajectory.keyframe_rate", format!("must be > 0, got {}", t.keyframe_rate));
        }
        if !(t.smoothing >= 0.0) {
            return fail("trajectory.smoothing", format!("must be >= 0, got {}", t.smoothing));
        }
        if !(t.roll_pitch_excitation >= 0.0) {
            return fail(
                "trajectory.roll_pitch_excitation",
                format!("must be >= 0, got {}", t.roll_pitch_excitation),
            );
        }
        if !t.waypoints.is_empty() && t.waypoints.len() < 2 {
            return fail("trajectory.waypoints", "need at least 2 waypoints".into());
        }
        if !(self.aruco_fov_half_angle > 0.0 && self.aruco_fov_half_angle < 0.5 * PI) {
            return fail("aruco_fov_half_angle", "must be in (0, pi/2)".into());
        }
        if !(self.grid_jitter >= 0.0) {
            return fail("grid_jitter", format!("must be >= 0, got {}", self.grid_jitter));
        }
        if !(self.camera_tilt >= 0.0 && self.camera_tilt < 0.5 * PI) {
            return fail("camera_tilt", format!("must be in [0, pi/2), got {}", self.camera_tilt));
        }
        let n = &self.noise;
        for (name, v) in [
            ("noise.aruco_trans_sigma", n.aruco_trans_sigma),
            ("noise.aruco_rot_sigma", n.aruco_rot_sigma),
            ("noise.blob_pixel_sigma", n.blob_pixel_sigma),
            ("noise.timestamp_jitter_sigma", n.timestamp_jitter_sigma),
            ("noise.vo_trans_sigma", n.vo_trans_sigma),
            ("noise.vo_rot_sigma", n.vo_rot_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(name, format!("must be >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&n.outlier_fraction) {
            return fail(
                "noise.outlier_fraction",
                format!("must be in [0, 1], got {}", n.outlier_fraction),
            );
        }
        self.intrinsics.validate().map_err(|e| InvalidConfig {
            field: "intrinsics".into(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraTruth {
    pub camera_id: u32,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGroundTruth {
    pub camera_poses_world: Vec<CameraTruth>,
    pub robot_trajectory_metric: Trajectory,
    pub offset: Pose,
    pub scale: f64,
}

impl ScenarioGroundTruth {
    pub fn camera(&self, id: u32) -> Option<&Pose> {
        self.camera_poses_world
            .iter()
            .find(|c| c.camera_id == id)
            .map(|c| &c.pose)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub trajectory_unscaled: Trajectory,
    pub arucos: Vec<ArucoDetection>,
    pub blobs: Vec<BlobDetection>,
    /// Generating camera of each blob, parallel to `blobs`. Oracle use only.
    pub blob_labels: Vec<u32>,
    pub intrinsics: FisheyeIntrinsics,
}

/// Builds ground truth and all measurements. Deterministic in the seeds.
pub fn generate_scenario(
    cfg: &ScenarioConfig,
) -> Result<(ScenarioGroundTruth, Dataset), InvalidConfig> {
    cfg.validate()?;
    let mut layout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (cameras, rows) = place_cameras(cfg, &mut layout_rng);
    // The metric trajectory is derived from the unscaled one so that scaling
    // the noise-free odometry reproduces it bit for bit.
    let base_unscaled = generate_trajectory(cfg, &rows)?.scaled(1.0 / cfg.true_scale);
    let trajectory = base_unscaled.scaled(cfg.true_scale);
    let gt = ScenarioGroundTruth {
        camera_poses_world: cameras,
        robot_trajectory_metric: trajectory,
        offset: cfg.true_offset,
        scale: cfg.true_scale,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.measurement_seed.unwrap_or(cfg.seed) ^ 0x5eed_ca11);
    let trajectory_unscaled = unscaled_odometry(&gt, base_unscaled, cfg, &mut rng);
    let arucos = simulate_aruco_detections(&gt, cfg, &mut rng);
    let (blobs, blob_labels) = simulate_blob_detections(&gt, cfg, &cfg.intrinsics, &mut rng);
    Ok((
        gt,
        Dataset {
            trajectory_unscaled,
            arucos,
            blobs,
            blob_labels,
            intrinsics: cfg.intrinsics,
        },
    ))
}

fn grid_shape(n: usize, area: [f64; 2]) -> (usize, usize) {
    let rows = ((n as f64 * area[1] / area[0]).sqrt().round() as usize).clamp(1, n);
    let cols = n.div_ceil(rows);
    (rows, cols)
}

/// Returns the cameras and the y coordinate of each grid row.
fn place_cameras(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> (Vec<CameraTruth>, Vec<f64>) {
    let (rows, cols) = grid_shape(cfg.n_cameras, cfg.area);
    let dx = cfg.area[0] / cols as f64;
    let dy = cfg.area[1] / rows as f64;
    let row_y: Vec<f64> = (0..rows).map(|r| (r as f64 + 0.5) * dy).collect();
    let [hmin, hmax] = cfg.ceiling_height_range;
    let mut cameras = Vec::with_capacity(cfg.n_cameras);
    for id in 0..cfg.n_cameras {
        let (r, c) = (id / cols, id % cols);
        let x = (c as f64 + 0.5) * dx + rng.random_range(-1.0..=1.0) * cfg.grid_jitter;
        let y = row_y[r] + rng.random_range(-1.0..=1.0) * cfg.grid_jitter;
        let z = if hmax > hmin { rng.random_range(hmin..=hmax) } else { hmin };
        let yaw = rng.random_range(-PI..PI);
        let tilt_dir = rng.random_range(0.0..TAU);
        let tilt = rng.random_range(0.0..=cfg.camera_tilt);
        let down = UnitQuaternion::from_euler_angles(PI, 0.0, yaw);
        let tilt_q = UnitQuaternion::from_scaled_axis(
            Vector3::new(tilt_dir.cos(), tilt_dir.sin(), 0.0) * tilt,
        );
        cameras.push(CameraTruth {
            camera_id: id as u32,
            pose: Pose::new(tilt_q * down, Vector3::new(x, y, z)),
        });
    }
    (cameras, row_y)
}

fn serpentine(cfg: &ScenarioConfig, rows: &[f64]) -> Vec<Vector2<f64>> {
    let (x0, x1) = (0.0, cfg.area[0]);
    let mut pts = Vec::new();
    for (i, &y) in rows.iter().enumerate() {
        if i % 2 == 0 {
            pts.push(Vector2::new(x0, y));
            pts.push(Vector2::new(x1, y));
        } else {
            pts.push(Vector2::new(x1, y));
            pts.push(Vector2::new(x0, y));
        }
    }
    if rows.len() == 1 {
        // out and back with a 2 m lateral offset so the loop is not degenerate
        pts.push(Vector2::new(x1, rows[0] - 2.0));
        pts.push(Vector2::new(x0, rows[0] - 2.0));
    } else if rows.len() % 2 == 1 {
        // finish on the far side: come back along the bottom edge
        pts.push(Vector2::new(x1, rows[0] - 0.5 * (rows[1] - rows[0])));
        pts.push(Vector2::new(x0, rows[0] - 0.5 * (rows[1] - rows[0])));
    }
    pts
}

/// Resamples a closed polyline every `ds` meters.
fn resample_loop(pts: &[Vector2<f64>], ds: f64) -> Vec<Vector2<f64>> {
    let mut out = Vec::new();
    let n = pts.len();
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        let len = (b - a).norm();
        let steps = ((len / ds).ceil() as usize).max(1);
        for k in 0..steps {
            out.push(a + (b - a) * (k as f64 / steps as f64));
        }
    }
    out
}

fn generate_trajectory(cfg: &ScenarioConfig, rows: &[f64]) -> Result<Trajectory, InvalidConfig> {
    let tc = &cfg.trajectory;
    let waypoints: Vec<Vector2<f64>> = if tc.waypoints.is_empty() {
        serpentine(cfg, rows)
    } else {
        tc.waypoints.iter().map(|w| Vector2::new(w[0], w[1])).collect()
    };
    const DS: f64 = 0.05;
    let dense = resample_loop(&waypoints, DS);
    let n = dense.len();
    // circular moving average rounds the corners, straight runs are unchanged
    let half = ((0.5 * tc.smoothing / DS).round() as usize).min((n - 1) / 2);
    let smooth: Vec<Vector2<f64>> = (0..n)
        .map(|i| {
            let sum: Vector2<f64> = (0..=2 * half)
                .map(|k| dense[(i + n + k - half) % n])
                .sum();
            sum / (2 * half + 1) as f64
        })
        .collect();

    let mut arc = Vec::with_capacity(n + 1);
    arc.push(0.0);
    for i in 0..n {
        let d = (smooth[(i + 1) % n] - smooth[i]).norm();
        arc.push(arc[i] + d);
    }
    let total = arc[n];
    if !(total > 0.0) {
        return Err(InvalidConfig {
            field: "trajectory.waypoints".into(),
            message: "loop has zero length".into(),
        });
    }
    let mut heading = Vec::with_capacity(n);
    let mut prev = 0.0;
    for i in 0..n {
        let d = smooth[(i + 1) % n] - smooth[(i + n - 1) % n];
        let mut h = d.y.atan2(d.x);
        if i > 0 {
            // unwrap
            h = prev + (h - prev + PI).rem_euclid(TAU) - PI;
        }
        heading.push(h);
        prev = h;
    }

    let step = tc.speed / tc.keyframe_rate;
    let count = (total / step).floor() as usize;
    let mut samples = Vec::with_capacity(count);
    let mut seg = 0;
    for k in 0..count {
        let s = k as f64 * step;
        while arc[seg + 1] < s {
            seg += 1;
        }
        let span = arc[seg + 1] - arc[seg];
        let a = if span > 0.0 { (s - arc[seg]) / span } else { 0.0 };
        let next = (seg + 1) % n;
        let pos = smooth[seg] * (1.0 - a) + smooth[next] * a;
        let next_heading = if next == 0 {
            heading[n - 1] + (heading[0] - heading[n - 1] + PI).rem_euclid(TAU) - PI
        } else {
            heading[next]
        };
        let yaw = heading[seg] * (1.0 - a) + next_heading * a;
        let t = k as f64 / tc.keyframe_rate;
        let e = tc.roll_pitch_excitation;
        let roll = e * (TAU * t / 6.0).sin();
        let pitch = e * (TAU * t / 9.0 + 1.0).sin();
        samples.push(TimedPose {
            stamp: t,
            pose: Pose::from_rpy(roll, pitch, yaw, Vector3::new(pos.x, pos.y, tc.robot_height)),
            keyframe_id: k as u64,
        });
    }
    Trajectory::new(samples).map_err(|e| InvalidConfig {
        field: "trajectory".into(),
        message: e.to_string(),
    })
}

fn gaussian_vector(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    let n: [f64; 3] = [
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ];
    Vector3::from(n) * sigma
}

fn unscaled_odometry(
    gt: &ScenarioGroundTruth,
    exact: Trajectory,
    cfg: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let (ts, rs) = (cfg.noise.vo_trans_sigma, cfg.noise.vo_rot_sigma);
    if ts > 0.0 || rs > 0.0 {
        let samples = gt
            .robot_trajectory_metric
            .samples()
            .iter()
            .map(|s| {
                let n = Pose::from_parts(gaussian_vector(rng, rs), gaussian_vector(rng, ts));
                TimedPose { pose: s.pose * n, ..*s }
            })
            .collect();
        Trajectory::new(samples)
            .expect("same timestamps")
            .scaled(1.0 / gt.scale)
    } else {
        exact
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let q: [f64; 4] = [
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ];
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
}

/// Angle between the optical axis and the direction to `p_cam`.
fn off_axis_angle(p_cam: &Vector3<f64>) -> f64 {
    p_cam.x.hypot(p_cam.y).atan2(p_cam.z)
}

/// One detection per keyframe and camera whose view cone holds the marker.
pub fn simulate_aruco_detections(
    gt: &ScenarioGroundTruth,
    cfg: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<ArucoDetection> {
    let noise = &cfg.noise;
    let jitter = Normal::new(0.0, noise.timestamp_jitter_sigma).expect("sigma >= 0");
    let inverse_cams: Vec<(u32, Pose)> = gt
        .camera_poses_world
        .iter()
        .map(|c| (c.camera_id, c.pose.inverse()))
        .collect();
    let mut out = Vec::new();
    for kf in gt.robot_trajectory_metric.samples() {
        let marker_world = kf.pose * gt.offset;
        for (id, cam_inv) in &inverse_cams {
            let exact = *cam_inv * marker_world;
            let dist = exact.translation().norm();
            if exact.translation().z <= 0.0
                || off_axis_angle(exact.translation()) > cfg.aruco_fov_half_angle
            {
                continue;
            }
            let outlier = noise.outlier_fraction > 0.0 && rng.random::<f64>() < noise.outlier_fraction;
            let pose = if outlier {
                let theta = cfg.aruco_fov_half_angle * rng.random::<f64>().sqrt();
                let az = rng.random_range(0.0..TAU);
                let r = dist * rng.random_range(0.5..1.5);
                let dir = Vector3::new(theta.sin() * az.cos(), theta.sin() * az.sin(), theta.cos());
                Pose::new(random_rotation(rng), dir * r)
            } else {
                exact * Pose::from_parts(
                    gaussian_vector(rng, noise.aruco_rot_sigma),
                    gaussian_vector(rng, noise.aruco_trans_sigma),
                )
            };
            let dt = if noise.timestamp_jitter_sigma > 0.0 { jitter.sample(rng) } else { 0.0 };
            out.push(ArucoDetection {
                camera_id: *id,
                stamp: (kf.stamp + dt).max(0.0),
                pose_marker_in_camera: pose,
            });
        }
    }
    out
}

/// Pixel of every camera visible in every keyframe's fisheye image, with the
/// generating camera id returned alongside.
pub fn simulate_blob_detections(
    gt: &ScenarioGroundTruth,
    cfg: &ScenarioConfig,
    intr: &FisheyeIntrinsics,
    rng: &mut ChaCha8Rng,
) -> (Vec<BlobDetection>, Vec<u32>) {
    let sigma = cfg.noise.blob_pixel_sigma;
    let (w, h) = (f64::from(intr.width) - 1.0, f64::from(intr.height) - 1.0);
    let mut blobs = Vec::new();
    let mut labels = Vec::new();
    for kf in gt.robot_trajectory_metric.samples() {
        for cam in &gt.camera_poses_world {
            let Some(px) = intr.project(&kf.pose, cam.pose.translation()).pixel() else {
                continue;
            };
            let noisy = if sigma > 0.0 {
                let n: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                px + Vector2::from(n) * sigma
            } else {
                px
            };
            blobs.push(BlobDetection {
                keyframe_id: kf.keyframe_id,
                pixel: Vector2::new(noisy.x.clamp(0.0, w), noisy.y.clamp(0.0, h)),
                camera_id: None,
            });
            labels.push(cam.camera_id);
        }
    }
    (blobs, labels)
}

/// Independent RNG for callers that drive the detection synthesizers directly.
pub fn measurement_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
