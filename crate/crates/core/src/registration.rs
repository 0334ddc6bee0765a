//! Three-stage registration of fixed ceiling cameras.
//!
//! 1. Scale and marker offset: relative fisheye motions `A` from the
//!    (unscaled) odometry are paired with relative marker motions `B` seen by
//!    one ceiling camera, and `A(s) X = X B` is solved for the odometry scale
//!    `s` and the fisheye-to-marker offset `X = T_f_m`.
//! 2. Looking down: every camera pose `T_w_c` is fitted to its marker
//!    detections through `T_w_c T_c_m = T_w_f(t) T_f_m`.
//! 3. Looking up: camera positions are refined against blob detections of the
//!    cameras in the upward fisheye image, rotations are left alone.
//!
//! Frames: `w` world (odometry origin), `f` fisheye, `m` marker, `c` ceiling
//! camera.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, info, warn};
use nalgebra::{DVector, Matrix3, SymmetricEigen, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_angle, rotation_log, FisheyeIntrinsics, Pose, Trajectory};
use crate::optimizer::{solve, Manifold, Problem, RobustLoss, SolveReport, SolverError, SolverOptions};

/// Minimum number of motion pairs for the scale/offset solve.
pub const MIN_SEGMENTS: usize = 10;

/// Rotation axes spread below this angle counts as degenerate motion.
pub const DEGENERATE_AXIS_SPREAD_DEG: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("only {found} motion segments, at least {needed} required")]
    InsufficientSegments { found: usize, needed: usize },
    #[error("camera {camera_id} has no detections inside the trajectory span")]
    NoValidDetections { camera_id: u32 },
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("no camera could be estimated")]
    NoCameras,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ScaleOffset,
    LookingDown,
    LookingUp,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::ScaleOffset => "scale/offset estimation",
            Stage::LookingDown => "looking-down camera pose estimation",
            Stage::LookingUp => "looking-up position refinement",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{stage} failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: RegistrationError,
}

/// Marker pose `T_c_m` measured by ceiling camera `camera_id`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArucoDetection {
    pub camera_id: u32,
    pub stamp: f64,
    pub pose_marker_in_camera: Pose,
}

/// Pixel where a ceiling camera appears in the fisheye image of a keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobDetection {
    pub keyframe_id: u64,
    pub pixel: Vector2<f64>,
    /// Set by association.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_id: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSegmentPair {
    pub camera_id: u32,
    /// Fisheye motion between the two detection times, unscaled translation.
    pub a: Pose,
    /// Marker motion `T_m1_m2` from the two detections.
    pub b: Pose,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMotion {
    pub min_trans: f64,
    pub min_rot: f64,
}

impl Default for MinMotion {
    fn default() -> Self {
        Self {
            min_trans: 0.02,
            min_rot: 0.01,
        }
    }
}

/// How well the fisheye motion constrains the offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observability {
    /// All relative rotation axes are parallel within
    /// [`DEGENERATE_AXIS_SPREAD_DEG`]; the offset translation along that axis
    /// is not determined by the data.
    pub degenerate_motion: bool,
    /// RMS angle of the rotation axes around the dominant one, degrees.
    pub axis_spread_deg: f64,
    /// Dominant rotation axis in the fisheye frame.
    pub dominant_axis: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleOffsetEstimate {
    pub scale: f64,
    /// `T_f_m`
    pub offset: Pose,
    pub observability: Observability,
    pub n_segments: usize,
    pub report: Option<SolveReport>,
}

impl ScaleOffsetEstimate {
    /// `s = 1`, `X = I`.
    pub fn initial() -> Self {
        Self {
            scale: 1.0,
            offset: Pose::identity(),
            observability: Observability {
                degenerate_motion: false,
                axis_spread_deg: 0.0,
                dominant_axis: Vector3::z(),
            },
            n_segments: 0,
            report: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEstimate {
    pub camera_id: u32,
    /// `T_w_c` after all stages.
    pub pose_world: Pose,
    /// `T_w_c` from the looking-down stage.
    pub pose_looking_down: Pose,
    pub n_aruco: usize,
    pub n_blob: usize,
    /// Position refined from blob detections.
    pub refined: bool,
    pub report: Option<SolveReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub min_motion: MinMotion,
    pub huber_delta: f64,
    /// Cauchy scale applied to pixel residuals divided by `pixel_sigma`.
    pub cauchy_scale: f64,
    pub pixel_sigma: f64,
    pub gate_px: f64,
    pub refine: bool,
    pub solver: SolverOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            min_motion: MinMotion::default(),
            huber_delta: 0.1,
            cauchy_scale: 1.0,
            pixel_sigma: 2.0,
            gate_px: 50.0,
            refine: true,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub scale_offset: ScaleOffsetEstimate,
    pub cameras: Vec<CameraEstimate>,
    pub scaled_trajectory: Trajectory,
    /// Blobs that survived association, labeled with their camera.
    pub associated_blobs: Vec<BlobDetection>,
    pub refinement_report: Option<SolveReport>,
    /// Marker detections outside the trajectory span.
    pub dropped_detections: usize,
}

fn group_by_camera(detections: &[ArucoDetection]) -> BTreeMap<u32, Vec<ArucoDetection>> {
    let mut groups: BTreeMap<u32, Vec<ArucoDetection>> = BTreeMap::new();
    for d in detections {
        groups.entry(d.camera_id).or_default().push(*d);
    }
    for g in groups.values_mut() {
        g.sort_by(|a, b| a.stamp.total_cmp(&b.stamp));
    }
    groups
}

/// Pairs time-adjacent detections of the same camera with the interpolated
/// fisheye motion between their timestamps.
///
/// Pairs whose marker motion is below both `min_motion` thresholds are dropped,
/// as are detections outside the trajectory span.
pub fn build_motion_segments(
    traj: &Trajectory,
    detections: &[ArucoDetection],
    min_motion: &MinMotion,
) -> Vec<MotionSegmentPair> {
    let mut pairs = Vec::new();
    for (camera_id, dets) in group_by_camera(detections) {
        let valid: Vec<(ArucoDetection, Pose)> = dets
            .into_iter()
            .filter_map(|d| traj.interpolate(d.stamp).ok().map(|p| (d, p)))
            .collect();
        for w in valid.windows(2) {
            let (d1, f1) = &w[0];
            let (d2, f2) = &w[1];
            let dt = d2.stamp - d1.stamp;
            if dt <= 0.0 {
                continue;
            }
            let b = d1.pose_marker_in_camera.inverse() * d2.pose_marker_in_camera;
            if b.translation().norm() < min_motion.min_trans
                && rotation_angle(b.rotation()) < min_motion.min_rot
            {
                continue;
            }
            pairs.push(MotionSegmentPair {
                camera_id,
                a: f1.inverse() * *f2,
                b,
                dt,
            });
        }
    }
    pairs
}

/// Spread of the relative rotation axes of the fisheye motions.
pub fn motion_observability(pairs: &[MotionSegmentPair]) -> Observability {
    let mut scatter = Matrix3::zeros();
    for p in pairs {
        let phi = rotation_log(p.a.rotation());
        scatter += phi * phi.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let l1 = eig.eigenvalues[order[0]].max(0.0);
    let l2 = eig.eigenvalues[order[1]].max(0.0);
    let spread = if l1 > 0.0 { (l2 / l1).sqrt().min(1.0).asin() } else { 0.0 };
    let mut axis: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    if axis.z < 0.0 {
        axis = -axis;
    }
    Observability {
        degenerate_motion: spread.to_degrees() <= DEGENERATE_AXIS_SPREAD_DEG,
        axis_spread_deg: spread.to_degrees(),
        dominant_axis: axis,
    }
}

/// Solves `min sum rho_huber(|A_i(s) X [-] X B_i|^2)` for the odometry scale
/// and the fisheye-to-marker offset.
pub fn estimate_scale_and_offset(
    pairs: &[MotionSegmentPair],
    init: &ScaleOffsetEstimate,
    huber_delta: f64,
    solver: &SolverOptions,
) -> Result<ScaleOffsetEstimate, RegistrationError> {
    if pairs.len() < MIN_SEGMENTS {
        return Err(RegistrationError::InsufficientSegments {
            found: pairs.len(),
            needed: MIN_SEGMENTS,
        });
    }
    let observability = motion_observability(pairs);
    if observability.degenerate_motion {
        warn!(
            "fisheye rotation axes spread only {:.3} deg; offset translation along {:?} is unobservable",
            observability.axis_spread_deg,
            observability.dominant_axis.as_slice()
        );
    }

    let mut problem = Problem::new();
    let s = problem.add_parameter_block(vec![init.scale], Manifold::Scalar)?;
    let x = problem.add_pose_block(&init.offset);
    for pair in pairs {
        let (a, b) = (pair.a, pair.b);
        problem.add_residual_block(&[s, x], RobustLoss::huber(huber_delta), move |p| {
            let offset = Pose::from_slice(p[1]).unwrap_or_default();
            let a_scaled = a.with_translation(a.translation() * p[0][0]);
            let r = (a_scaled * offset).ominus(&(offset * b));
            DVector::from_column_slice(r.to_vector().as_slice())
        })?;
    }
    let report = solve(&mut problem, solver)?;
    let scale = problem.values(s)[0];
    debug!("scale/offset solve: {report:?}");
    if !(scale > 0.0) {
        return Err(RegistrationError::NonPositiveScale(scale));
    }
    Ok(ScaleOffsetEstimate {
        scale,
        offset: problem.pose(x),
        observability,
        n_segments: pairs.len(),
        report: Some(report),
    })
}

/// Multiplies every translation of the trajectory by `s`.
pub fn apply_scale(traj: &Trajectory, s: f64) -> Result<Trajectory, RegistrationError> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(RegistrationError::NonPositiveScale(s));
    }
    Ok(traj.scaled(s))
}

/// `T_w_c = T_w_f(t) T_f_m (T_c_m)^-1` for a single detection.
pub fn initialize_camera_pose(
    det: &ArucoDetection,
    traj: &Trajectory,
    offset: &Pose,
) -> Result<Pose, RegistrationError> {
    let fisheye = traj
        .interpolate(det.stamp)
        .map_err(|_| RegistrationError::NoValidDetections {
            camera_id: det.camera_id,
        })?;
    Ok(fisheye * *offset * det.pose_marker_in_camera.inverse())
}

/// Fits `T_w_c` to all marker detections of one camera.
pub fn estimate_camera_pose(
    camera_id: u32,
    detections: &[ArucoDetection],
    traj: &Trajectory,
    offset: &Pose,
    huber_delta: f64,
    solver: &SolverOptions,
) -> Result<CameraEstimate, RegistrationError> {
    let mut valid: Vec<(ArucoDetection, Pose)> = detections
        .iter()
        .filter(|d| d.camera_id == camera_id)
        .filter_map(|d| traj.interpolate(d.stamp).ok().map(|f| (*d, f)))
        .collect();
    if valid.is_empty() {
        return Err(RegistrationError::NoValidDetections { camera_id });
    }
    valid.sort_by(|a, b| a.0.stamp.total_cmp(&b.0.stamp));
    let (median, _) = &valid[(valid.len() - 1) / 2];
    let init = initialize_camera_pose(median, traj, offset)?;

    let mut problem = Problem::new();
    let cam = problem.add_pose_block(&init);
    for (det, fisheye) in &valid {
        let measured = det.pose_marker_in_camera;
        let marker_world = *fisheye * *offset;
        problem.add_residual_block(&[cam], RobustLoss::huber(huber_delta), move |p| {
            let t_w_c = Pose::from_slice(p[0]).unwrap_or_default();
            let r = (t_w_c * measured).ominus(&marker_world);
            DVector::from_column_slice(r.to_vector().as_slice())
        })?;
    }
    let report = solve(&mut problem, solver)?;
    let pose = problem.pose(cam);
    Ok(CameraEstimate {
        camera_id,
        pose_world: pose,
        pose_looking_down: pose,
        n_aruco: valid.len(),
        n_blob: 0,
        refined: false,
        report: Some(report),
    })
}

/// Labels blobs with the camera whose predicted projection is nearest,
/// within `gate_px`. Matching is one-to-one per keyframe, greedy by distance.
/// Unmatched blobs are dropped; input order is kept.
pub fn associate_blobs(
    blobs: &[BlobDetection],
    cameras: &[CameraEstimate],
    traj: &Trajectory,
    intr: &FisheyeIntrinsics,
    gate_px: f64,
) -> Vec<BlobDetection> {
    let mut by_keyframe: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, b) in blobs.iter().enumerate() {
        by_keyframe.entry(b.keyframe_id).or_default().push(i);
    }
    let mut labels: Vec<Option<u32>> = vec![None; blobs.len()];
    for (kf, idx) in by_keyframe {
        let Some(frame) = traj.keyframe(kf) else {
            continue;
        };
        let predicted: Vec<(u32, Vector2<f64>)> = cameras
            .iter()
            .filter_map(|c| {
                intr.project(&frame.pose, c.pose_world.translation())
                    .pixel()
                    .map(|px| (c.camera_id, px))
            })
            .collect();
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for &bi in &idx {
            for (ci, (_, px)) in predicted.iter().enumerate() {
                let d = (blobs[bi].pixel - px).norm();
                if d <= gate_px {
                    candidates.push((d, bi, ci));
                }
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used_cam = BTreeSet::new();
        for (_, bi, ci) in candidates {
            if labels[bi].is_none() && !used_cam.contains(&ci) {
                labels[bi] = Some(predicted[ci].0);
                used_cam.insert(ci);
            }
        }
    }
    blobs
        .iter()
        .zip(labels)
        .filter_map(|(b, l)| {
            l.map(|camera_id| BlobDetection {
                camera_id: Some(camera_id),
                ..*b
            })
        })
        .collect()
}

/// Refines camera positions by minimizing the Cauchy-robustified fisheye
/// reprojection error of the labeled blobs.
///
/// A blob contributes (`w_kj = 1`) only when its camera currently projects
/// inside the field of view of its keyframe. Cameras with fewer than two
/// contributing keyframes keep their position and stay unrefined. Rotations
/// are never touched.
pub fn refine_camera_positions(
    cameras: &[CameraEstimate],
    blobs: &[BlobDetection],
    traj: &Trajectory,
    intr: &FisheyeIntrinsics,
    opts: &PipelineOptions,
) -> Result<(Vec<CameraEstimate>, Option<SolveReport>), RegistrationError> {
    let mut terms: BTreeMap<u32, Vec<(Pose, Vector2<f64>, u64)>> = BTreeMap::new();
    for b in blobs {
        let (Some(cid), Some(frame)) = (b.camera_id, traj.keyframe(b.keyframe_id)) else {
            continue;
        };
        let Some(cam) = cameras.iter().find(|c| c.camera_id == cid) else {
            continue;
        };
        if intr.project(&frame.pose, cam.pose_world.translation()).is_visible() {
            terms
                .entry(cid)
                .or_default()
                .push((frame.pose.inverse(), b.pixel, b.keyframe_id));
        }
    }

    let mut out: Vec<CameraEstimate> = cameras
        .iter()
        .map(|c| CameraEstimate {
            n_blob: terms.get(&c.camera_id).map_or(0, Vec::len),
            refined: false,
            ..c.clone()
        })
        .collect();

    let mut problem = Problem::new();
    let mut blocks = Vec::new();
    let intr = *intr;
    let sigma = opts.pixel_sigma;
    for (i, cam) in out.iter().enumerate() {
        let Some(t) = terms.get(&cam.camera_id) else {
            continue;
        };
        let keyframes: BTreeSet<u64> = t.iter().map(|x| x.2).collect();
        if keyframes.len() < 2 {
            debug!("camera {} seen in {} keyframe(s), not refined", cam.camera_id, keyframes.len());
            continue;
        }
        let id = problem.add_parameter_block(
            cam.pose_world.translation().as_slice().to_vec(),
            Manifold::Euclidean,
        )?;
        blocks.push((i, id));
        for (world_to_fisheye, pixel, _) in t {
            let (world_to_fisheye, pixel) = (*world_to_fisheye, *pixel);
            problem.add_residual_block(&[id], RobustLoss::cauchy(opts.cauchy_scale), move |p| {
                let pos = Vector3::new(p[0][0], p[0][1], p[0][2]);
                let pc = world_to_fisheye.transform_point(&pos);
                let r = (pixel - intr.project_unbounded(&pc)) / sigma;
                DVector::from_column_slice(r.as_slice())
            })?;
        }
    }
    if blocks.is_empty() {
        return Ok((out, None));
    }
    let report = solve(&mut problem, &opts.solver)?;
    for (i, id) in blocks {
        let v = problem.values(id);
        let cam = &mut out[i];
        cam.pose_world = cam.pose_world.with_translation(Vector3::new(v[0], v[1], v[2]));
        cam.refined = true;
    }
    Ok((out, Some(report)))
}

/// Runs all stages: motion segments, scale/offset, rescaling, per-camera
/// looking-down fit, blob association and looking-up refinement.
pub fn run_pipeline(
    traj_unscaled: &Trajectory,
    arucos: &[ArucoDetection],
    blobs: &[BlobDetection],
    intr: &FisheyeIntrinsics,
    opts: &PipelineOptions,
) -> Result<CalibrationResult, PipelineError> {
    let at = |stage| move |source| PipelineError { stage, source };

    let pairs = build_motion_segments(traj_unscaled, arucos, &opts.min_motion);
    info!("{} motion segments from {} marker detections", pairs.len(), arucos.len());
    let scale_offset = estimate_scale_and_offset(
        &pairs,
        &ScaleOffsetEstimate::initial(),
        opts.huber_delta,
        &opts.solver,
    )
    .map_err(at(Stage::ScaleOffset))?;
    info!("scale {:.9}, offset {:?}", scale_offset.scale, scale_offset.offset);

    let traj = apply_scale(traj_unscaled, scale_offset.scale).map_err(at(Stage::ScaleOffset))?;
    let dropped_detections = arucos.iter().filter(|d| !traj.contains_time(d.stamp)).count();
    if dropped_detections > 0 {
        warn!("{dropped_detections} marker detections outside the trajectory span were dropped");
    }

    let groups = group_by_camera(arucos);
    let estimates: Vec<(u32, Result<CameraEstimate, RegistrationError>)> = groups
        .par_iter()
        .map(|(&id, dets)| {
            let est = estimate_camera_pose(
                id,
                dets,
                &traj,
                &scale_offset.offset,
                opts.huber_delta,
                &opts.solver,
            );
            (id, est)
        })
        .collect();
    let mut cameras = Vec::with_capacity(estimates.len());
    for (id, est) in estimates {
        match est {
            Ok(c) => cameras.push(c),
            Err(RegistrationError::NoValidDetections { .. }) => {
                warn!("camera {id}: no detections inside the trajectory span, skipped")
            }
            Err(e) => return Err(at(Stage::LookingDown)(e)),
        }
    }
    if cameras.is_empty() {
        return Err(at(Stage::LookingDown)(RegistrationError::NoCameras));
    }

    let mut associated_blobs = Vec::new();
    let mut refinement_report = None;
    if opts.refine && !blobs.is_empty() {
        associated_blobs = associate_blobs(blobs, &cameras, &traj, intr, opts.gate_px);
        info!("{} of {} blobs associated", associated_blobs.len(), blobs.len());
        let (refined, report) =
            refine_camera_positions(&cameras, &associated_blobs, &traj, intr, opts)
                .map_err(at(Stage::LookingUp))?;
        cameras = refined;
        refinement_report = report;
    }

    Ok(CalibrationResult {
        scale_offset,
        cameras,
        scaled_trajectory: traj,
        associated_blobs,
        refinement_report,
        dropped_detections,
    })
}
