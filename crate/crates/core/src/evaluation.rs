//! Accuracy metrics: fisheye reprojection RMSE of the estimated camera
//! positions, and per-axis RMSD between two sets of camera poses after
//! bringing them into a common frame.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix3xX, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{canonical_quaternion, FisheyeIntrinsics, Pose, Trajectory};
use crate::registration::{BlobDetection, CameraEstimate};
use crate::simulator::ScenarioGroundTruth;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvaluationError {
    #[error("only {found} corresponding cameras, at least {needed} required")]
    TooFewCorrespondences { found: usize, needed: usize },
    #[error("points are collinear, alignment is not unique")]
    DegenerateGeometry,
}

/// One blob against the projection of its camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionResidual {
    pub camera_id: u32,
    pub keyframe_id: u64,
    pub observed: Vector2<f64>,
    pub predicted: Vector2<f64>,
}

impl ReprojectionResidual {
    pub fn error(&self) -> f64 {
        (self.observed - self.predicted).norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionReport {
    pub rmse_px: f64,
    pub per_camera_rmse_px: BTreeMap<u32, f64>,
    pub n_terms: usize,
}

/// Residuals of labeled blobs whose camera projects inside the image of the
/// blob's keyframe. Blobs without a label, keyframe or position are skipped.
pub fn reprojection_residuals(
    positions: &BTreeMap<u32, Vector3<f64>>,
    blobs: &[BlobDetection],
    traj: &Trajectory,
    intr: &FisheyeIntrinsics,
) -> Vec<ReprojectionResidual> {
    blobs
        .iter()
        .filter_map(|b| {
            let camera_id = b.camera_id?;
            let frame = traj.keyframe(b.keyframe_id)?;
            let predicted = intr.project(&frame.pose, positions.get(&camera_id)?).pixel()?;
            Some(ReprojectionResidual {
                camera_id,
                keyframe_id: b.keyframe_id,
                observed: b.pixel,
                predicted,
            })
        })
        .collect()
}

pub fn summarize_residuals(residuals: &[ReprojectionResidual]) -> ReprojectionReport {
    let mut per_camera: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for r in residuals {
        let e2 = r.error().powi(2);
        total += e2;
        let entry = per_camera.entry(r.camera_id).or_default();
        entry.0 += e2;
        entry.1 += 1;
    }
    let n = residuals.len();
    ReprojectionReport {
        rmse_px: if n > 0 { (total / n as f64).sqrt() } else { 0.0 },
        per_camera_rmse_px: per_camera
            .into_iter()
            .map(|(id, (s, k))| (id, (s / k as f64).sqrt()))
            .collect(),
        n_terms: n,
    }
}

/// Unrobustified RMSE of blob pixels against the projected camera positions.
pub fn reprojection_rmse(
    cameras: &[CameraEstimate],
    blobs: &[BlobDetection],
    traj: &Trajectory,
    intr: &FisheyeIntrinsics,
) -> ReprojectionReport {
    let positions = cameras
        .iter()
        .map(|c| (c.camera_id, *c.pose_world.translation()))
        .collect();
    summarize_residuals(&reprojection_residuals(&positions, blobs, traj, intr))
}

/// `x -> scale * R x + t`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl AlignmentTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        Self {
            rotation,
            translation: -(rotation * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }
}

/// Closed-form least-squares alignment of `source` onto `target` (centroids
/// plus SVD of the cross-covariance), matched by id.
pub fn align_point_sets(
    source: &[(u32, Vector3<f64>)],
    target: &[(u32, Vector3<f64>)],
    with_scale: bool,
) -> Result<AlignmentTransform, EvaluationError> {
    let target_map: BTreeMap<u32, Vector3<f64>> = target.iter().copied().collect();
    let mut pairs: Vec<(u32, Vector3<f64>, Vector3<f64>)> = source
        .iter()
        .filter_map(|(id, p)| target_map.get(id).map(|q| (*id, *p, *q)))
        .collect();
    pairs.sort_by_key(|p| p.0);
    pairs.dedup_by_key(|p| p.0);
    if pairs.len() < 3 {
        return Err(EvaluationError::TooFewCorrespondences {
            found: pairs.len(),
            needed: 3,
        });
    }
    let n = pairs.len() as f64;
    let mu_p = pairs.iter().map(|x| x.1).sum::<Vector3<f64>>() / n;
    let mu_q = pairs.iter().map(|x| x.2).sum::<Vector3<f64>>() / n;
    let p = Matrix3xX::from_columns(&pairs.iter().map(|x| x.1 - mu_p).collect::<Vec<_>>());
    let q = Matrix3xX::from_columns(&pairs.iter().map(|x| x.2 - mu_q).collect::<Vec<_>>());

    for m in [&p, &q] {
        let sv = (m * m.transpose()).symmetric_eigenvalues();
        let mut sv: Vec<f64> = sv.iter().map(|v| v.max(0.0)).collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        if sv[0] == 0.0 || sv[1] <= 1e-18 * sv[0] {
            return Err(EvaluationError::DegenerateGeometry);
        }
    }

    if pairs.iter().all(|(_, p, q)| p == q) {
        return Ok(AlignmentTransform::identity());
    }

    let cov: Matrix3<f64> = &q * p.transpose() / n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = if with_scale {
        let var_p = p.norm_squared() / n;
        (svd.singular_values.component_mul(&s.diagonal())).sum() / var_p
    } else {
        1.0
    };
    let rotation = canonical_quaternion(
        *UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)).quaternion(),
    );
    Ok(AlignmentTransform {
        rotation,
        translation: mu_q - rotation * mu_p * scale,
        scale,
    })
}

/// Per-axis RMS differences between corresponding camera poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRmsdReport {
    /// (roll, pitch, yaw) of the world-frame rotation difference, degrees.
    pub rot_rmsd_deg: [f64; 3],
    /// (x, y, z), meters.
    pub trans_rmsd_m: [f64; 3],
    pub n_matched: usize,
    pub alignment: AlignmentTransform,
}

/// `b a^-1`, written out so that equal inputs give an exactly zero vector part.
fn relative_rotation(b: &UnitQuaternion<f64>, a: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let (bw, bv) = (b.w, b.imag());
    let (aw, av) = (a.w, a.imag());
    let w = bw * aw + bv.dot(&av);
    let v = bv * aw - av * bw - bv.cross(&av);
    UnitQuaternion::new_normalize(Quaternion::from_parts(w, v))
}

fn rmsd(
    reference: &BTreeMap<u32, Pose>,
    other: &BTreeMap<u32, Pose>,
    alignment: AlignmentTransform,
) -> PoseRmsdReport {
    let mut rot = [0.0; 3];
    let mut trans = [0.0; 3];
    let mut n = 0usize;
    for (id, a) in reference {
        let Some(b) = other.get(id) else { continue };
        let dp = a.translation() - alignment.apply(b.translation());
        let delta = alignment.rotation * relative_rotation(b.rotation(), a.rotation());
        let (roll, pitch, yaw) = delta.euler_angles();
        for (acc, v) in rot.iter_mut().zip([roll, pitch, yaw]) {
            *acc += v.to_degrees().powi(2);
        }
        for (acc, v) in trans.iter_mut().zip(dp.iter()) {
            *acc += v * v;
        }
        n += 1;
    }
    let finish = |a: [f64; 3]| a.map(|s| if n > 0 { (s / n as f64).sqrt() } else { 0.0 });
    PoseRmsdReport {
        rot_rmsd_deg: finish(rot),
        trans_rmsd_m: finish(trans),
        n_matched: n,
        alignment,
    }
}

fn pose_map(cams: &[CameraEstimate]) -> BTreeMap<u32, Pose> {
    cams.iter().map(|c| (c.camera_id, c.pose_world)).collect()
}

fn positions(poses: &BTreeMap<u32, Pose>) -> Vec<(u32, Vector3<f64>)> {
    poses.iter().map(|(id, p)| (*id, *p.translation())).collect()
}

/// RMSD between two estimate sets after rigidly aligning `set_b`'s positions
/// onto `set_a`.
pub fn pose_rmsd(
    set_a: &[CameraEstimate],
    set_b: &[CameraEstimate],
) -> Result<PoseRmsdReport, EvaluationError> {
    let (a, b) = (pose_map(set_a), pose_map(set_b));
    let alignment = align_point_sets(&positions(&b), &positions(&a), false)?;
    Ok(rmsd(&a, &b, alignment))
}

/// RMSD of estimates against simulator ground truth. Without `align` the
/// estimates are compared in the ground-truth frame directly.
pub fn compare_to_ground_truth(
    est: &[CameraEstimate],
    gt: &ScenarioGroundTruth,
    align: bool,
) -> Result<PoseRmsdReport, EvaluationError> {
    let truth: BTreeMap<u32, Pose> = gt
        .camera_poses_world
        .iter()
        .map(|c| (c.camera_id, c.pose))
        .collect();
    let estimated = pose_map(est);
    let alignment = if align {
        align_point_sets(&positions(&estimated), &positions(&truth), false)?
    } else {
        let common = estimated.keys().filter(|id| truth.contains_key(id)).count();
        if common < 3 {
            return Err(EvaluationError::TooFewCorrespondences { found: common, needed: 3 });
        }
        AlignmentTransform::identity()
    };
    Ok(rmsd(&truth, &estimated, alignment))
}
