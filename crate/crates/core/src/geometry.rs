//! Rigid-body algebra, pose interpolation and the fisheye projection model.
//!
//! Poses are stored as a unit quaternion plus a translation in meters. A pose
//! `T_a_b` maps points expressed in frame `b` into frame `a`, so chains read
//! left to right: `T_w_m = T_w_f * T_f_m`.
//!
//! Every constructor renormalizes the quaternion and forces the canonical sign
//! (`w >= 0`, ties broken by the first nonzero vector component), which makes
//! equality and serialization deterministic.

use std::collections::HashMap;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("timestamp {t} outside trajectory span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

/// Renormalizes `q` and flips it into the `w >= 0` hemisphere. Quaternions
/// already unit to rounding are kept bit-for-bit, so the map is idempotent.
pub fn canonical_quaternion(q: Quaternion<f64>) -> UnitQuaternion<f64> {
    let q = if (q.norm_squared() - 1.0).abs() <= 4.0 * f64::EPSILON {
        q
    } else {
        q.normalize()
    };
    let flip = if q.w != 0.0 {
        q.w < 0.0
    } else {
        [q.i, q.j, q.k]
            .into_iter()
            .find(|c| *c != 0.0)
            .is_some_and(|c| c < 0.0)
    };
    UnitQuaternion::new_unchecked(if flip { -q } else { q })
}

/// Rotation vector (axis * angle) of a unit quaternion, angle in `[0, pi]`.
///
/// Uses `atan2` on the vector part so tiny rotations keep full precision.
pub fn rotation_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = v.norm();
    if n == 0.0 {
        return Vector3::zeros();
    }
    v * (2.0 * n.atan2(w) / n)
}

/// `conj(a) * b`, written out so that `a == b` gives an exactly zero vector
/// part.
fn conj_mul(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let (aw, ax, ay, az) = (a.w, a.i, a.j, a.k);
    let (bw, bx, by, bz) = (b.w, b.i, b.j, b.k);
    UnitQuaternion::new_unchecked(Quaternion::new(
        aw * bw + ax * bx + ay * by + az * bz,
        aw * bx - ax * bw - (ay * bz - az * by),
        aw * by - ay * bw - (az * bx - ax * bz),
        aw * bz - az * bw - (ax * by - ay * bx),
    ))
}

/// Unit quaternion for a rotation vector.
pub fn rotation_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = phi.norm();
    let half = 0.5 * theta;
    // sin(theta/2)/theta, series below 1e-4 rad
    let k = if theta < 1e-4 {
        0.5 - theta * theta / 48.0
    } else {
        half.sin() / theta
    };
    let q = Quaternion::new(half.cos(), phi.x * k, phi.y * k, phi.z * k);
    canonical_quaternion(q)
}

/// Rotation angle in `[0, pi]`.
pub fn rotation_angle(q: &UnitQuaternion<f64>) -> f64 {
    rotation_log(q).norm()
}

/// Spherical linear interpolation along the shortest arc.
///
/// `alpha == 0` and `alpha == 1` return the endpoints bit-exactly.
pub fn slerp(qa: &UnitQuaternion<f64>, qb: &UnitQuaternion<f64>, alpha: f64) -> UnitQuaternion<f64> {
    if alpha <= 0.0 {
        return *qa;
    }
    if alpha >= 1.0 {
        return *qb;
    }
    let rel = canonical_quaternion(*(qa.inverse() * qb).quaternion());
    let step = rotation_exp(&(rotation_log(&rel) * alpha));
    canonical_quaternion(*(qa * step).quaternion())
}

/// Manifold difference between two poses: translation and rotation vector of
/// the relative pose `b^-1 * a`. Zero iff `a == b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tangent6 {
    /// Translation part, meters.
    pub rho: Vector3<f64>,
    /// Rotation part, radians, `|phi| <= pi`.
    pub phi: Vector3<f64>,
}

impl Tangent6 {
    pub fn zeros() -> Self {
        Self {
            rho: Vector3::zeros(),
            phi: Vector3::zeros(),
        }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rho: v.fixed_rows::<3>(0).into_owned(),
            phi: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    /// `[rho, phi]` stacked.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Rigid transform in SE(3).
#[derive(Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl fmt::Debug for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.quaternion();
        let t = &self.translation;
        write!(
            f,
            "Pose(q=[{:.6}, {:.6}, {:.6}, {:.6}], t=[{:.6}, {:.6}, {:.6}])",
            q.w, q.i, q.j, q.k, t.x, t.y, t.z
        )
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical_quaternion(*rotation.quaternion()),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation,
        }
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Pose from a rotation vector and a translation.
    pub fn from_parts(rotation_vector: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rotation_exp(&rotation_vector),
            translation,
        }
    }

    /// Rotation `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        Self::new(
            UnitQuaternion::from_euler_angles(roll, pitch, yaw),
            translation,
        )
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Same rotation (bit-exact), new translation.
    pub fn with_translation(&self, translation: Vector3<f64>) -> Self {
        Self {
            rotation: self.rotation,
            translation,
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Relative pose expressed as (translation, rotation vector) of `other^-1 * self`.
    pub fn ominus(&self, other: &Pose) -> Tangent6 {
        let rho = other.rotation.inverse_transform_vector(&(self.translation - other.translation));
        let rel = conj_mul(&other.rotation, &self.rotation);
        Tangent6 {
            rho,
            phi: rotation_log(&rel),
        }
    }

    /// Right-perturbation retraction, the inverse of [`Pose::ominus`]:
    /// `self.retract(d).ominus(self) == d`.
    pub fn retract(&self, delta: &Tangent6) -> Pose {
        Pose::new(
            self.rotation * rotation_exp(&delta.phi),
            self.translation + self.rotation * delta.rho,
        )
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = self.rotation.to_homogeneous();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `[qw, qx, qy, qz, tx, ty, tz]`
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        let t = &self.translation;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    /// Parses `[qw, qx, qy, qz, tx, ty, tz]`. The quaternion is renormalized.
    pub fn from_slice(v: &[f64]) -> Result<Pose, GeometryError> {
        if v.len() != 7 {
            return Err(GeometryError::InvalidPose(format!(
                "expected 7 values, got {}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite value".into()));
        }
        let q = Quaternion::new(v[0], v[1], v[2], v[3]);
        if q.norm() == 0.0 {
            return Err(GeometryError::InvalidPose("zero quaternion".into()));
        }
        Ok(Pose::new(
            UnitQuaternion::new_unchecked(q),
            Vector3::new(v[4], v[5], v[6]),
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = <[f64; 7]>::deserialize(deserializer)?;
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(D::Error::custom(format!(
                "pose quaternion norm {norm} is not 1"
            )));
        }
        Pose::from_slice(&v).map_err(D::Error::custom)
    }
}

/// One keyframe of the fisheye camera trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedPose {
    /// Seconds.
    pub stamp: f64,
    pub pose: Pose,
    pub keyframe_id: u64,
}

/// Keyframe poses of the fisheye camera in the world frame, strictly
/// increasing in time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: Vec<TimedPose>,
    index: HashMap<u64, usize>,
}

impl Trajectory {
    pub fn new(samples: Vec<TimedPose>) -> Result<Self, GeometryError> {
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if !s.stamp.is_finite() || s.stamp < 0.0 {
                return Err(GeometryError::InvalidTrajectory(format!(
                    "keyframe {} has invalid timestamp {}",
                    s.keyframe_id, s.stamp
                )));
            }
            if !s.pose.is_finite() {
                return Err(GeometryError::InvalidTrajectory(format!(
                    "keyframe {} has a non-finite pose",
                    s.keyframe_id
                )));
            }
            if i > 0 && s.stamp <= samples[i - 1].stamp {
                return Err(GeometryError::InvalidTrajectory(format!(
                    "timestamps not strictly increasing at keyframe {}",
                    s.keyframe_id
                )));
            }
            if index.insert(s.keyframe_id, i).is_some() {
                return Err(GeometryError::InvalidTrajectory(format!(
                    "duplicate keyframe id {}",
                    s.keyframe_id
                )));
            }
        }
        Ok(Self { samples, index })
    }

    pub fn samples(&self) -> &[TimedPose] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First and last timestamp.
    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.samples.first()?.stamp, self.samples.last()?.stamp))
    }

    pub fn contains_time(&self, t: f64) -> bool {
        self.span().is_some_and(|(a, b)| t >= a && t <= b)
    }

    pub fn keyframe(&self, keyframe_id: u64) -> Option<&TimedPose> {
        self.index.get(&keyframe_id).map(|&i| &self.samples[i])
    }

    /// Pose at time `t`: linear blend of the bracketing keyframe translations
    /// and slerp of their rotations.
    pub fn interpolate(&self, t: f64) -> Result<Pose, GeometryError> {
        let out_of_range = || {
            let (start, end) = self.span().unwrap_or((f64::NAN, f64::NAN));
            GeometryError::OutOfRange { t, start, end }
        };
        if self.samples.len() < 2 || !self.contains_time(t) {
            return Err(out_of_range());
        }
        // first sample with stamp > t
        let j = self.samples.partition_point(|s| s.stamp <= t);
        if j == self.samples.len() {
            return Ok(self.samples[j - 1].pose);
        }
        Ok(interpolate_between(&self.samples[j - 1], &self.samples[j], t))
    }

    /// Copy with every translation multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Trajectory {
        let samples = self
            .samples
            .iter()
            .map(|tp| TimedPose {
                stamp: tp.stamp,
                pose: tp.pose.with_translation(tp.pose.translation() * s),
                keyframe_id: tp.keyframe_id,
            })
            .collect();
        Trajectory {
            samples,
            index: self.index.clone(),
        }
    }

    /// Copy with every pose left-composed by `g`.
    pub fn transformed(&self, g: &Pose) -> Trajectory {
        let samples = self
            .samples
            .iter()
            .map(|tp| TimedPose {
                pose: g * &tp.pose,
                ..*tp
            })
            .collect();
        Trajectory {
            samples,
            index: self.index.clone(),
        }
    }
}

impl Serialize for Trajectory {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.samples.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let samples = Vec::<TimedPose>::deserialize(deserializer)?;
        Trajectory::new(samples).map_err(D::Error::custom)
    }
}

/// Interpolates inside one segment `[a.stamp, b.stamp]`.
pub fn interpolate_between(a: &TimedPose, b: &TimedPose, t: f64) -> Pose {
    let alpha = ((t - a.stamp) / (b.stamp - a.stamp)).clamp(0.0, 1.0);
    let translation = a.pose.translation() * (1.0 - alpha) + b.pose.translation() * alpha;
    Pose {
        rotation: slerp(a.pose.rotation(), b.pose.rotation(), alpha),
        translation,
    }
}

/// Outcome of projecting a point into the fisheye image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Visible(Vector2<f64>),
    NotVisible,
}

impl Projection {
    pub fn pixel(&self) -> Option<Vector2<f64>> {
        match self {
            Projection::Visible(p) => Some(*p),
            Projection::NotVisible => None,
        }
    }

    pub fn is_visible(&self) -> bool {
        matches!(self, Projection::Visible(_))
    }
}

/// Equidistant fisheye with odd-polynomial radial distortion:
/// `r(theta) = theta + k1 theta^3 + k2 theta^5 + k3 theta^7 + k4 theta^9`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisheyeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k: [f64; 4],
    pub width: u32,
    pub height: u32,
    /// Full field of view, radians.
    pub max_fov: f64,
}

impl Default for FisheyeIntrinsics {
    /// 1920x1080 sensor behind a 160 degree lens.
    fn default() -> Self {
        Self {
            fx: 380.0,
            fy: 380.0,
            cx: 960.0,
            cy: 540.0,
            k: [-0.01, 0.002, 0.0, 0.0],
            width: 1920,
            height: 1080,
            max_fov: 160f64.to_radians(),
        }
    }
}

impl FisheyeIntrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: String| Err(GeometryError::InvalidIntrinsics(m));
        let all = [self.fx, self.fy, self.cx, self.cy, self.max_fov];
        if all.iter().chain(self.k.iter()).any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if !(0.0..f64::from(self.width)).contains(&self.cx) {
            return bad(format!("cx={} outside [0, {})", self.cx, self.width));
        }
        if !(0.0..f64::from(self.height)).contains(&self.cy) {
            return bad(format!("cy={} outside [0, {})", self.cy, self.height));
        }
        if !(self.max_fov > 0.0 && self.max_fov <= std::f64::consts::PI) {
            return bad(format!("max_fov={} outside (0, pi]", self.max_fov));
        }
        Ok(())
    }

    /// Distorted normalized radius for incidence angle `theta`.
    pub fn distort(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let [k1, k2, k3, k4] = self.k;
        theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
    }

    /// Projection of a camera-frame point ignoring the field-of-view gate.
    /// Smooth everywhere except at the optical center.
    pub fn project_unbounded(&self, p_cam: &Vector3<f64>) -> Vector2<f64> {
        let rxy = p_cam.x.hypot(p_cam.y);
        if rxy == 0.0 {
            return Vector2::new(self.cx, self.cy);
        }
        let theta = rxy.atan2(p_cam.z);
        let d = self.distort(theta) / rxy;
        Vector2::new(self.cx + self.fx * d * p_cam.x, self.cy + self.fy * d * p_cam.y)
    }

    /// Projection of a point given in the camera frame.
    pub fn project_camera_point(&self, p_cam: &Vector3<f64>) -> Projection {
        let n = p_cam.norm();
        if n == 0.0 || !n.is_finite() {
            return Projection::NotVisible;
        }
        let theta = p_cam.x.hypot(p_cam.y).atan2(p_cam.z);
        if theta > 0.5 * self.max_fov {
            return Projection::NotVisible;
        }
        Projection::Visible(self.project_unbounded(p_cam))
    }

    /// Projects a world point seen by a camera with pose `cam_pose_in_world`.
    pub fn project(&self, cam_pose_in_world: &Pose, point_world: &Vector3<f64>) -> Projection {
        let p_cam = cam_pose_in_world.inverse().transform_point(point_world);
        self.project_camera_point(&p_cam)
    }

    pub fn contains_pixel(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0
            && px.y >= 0.0
            && px.x <= f64::from(self.width)
            && px.y <= f64::from(self.height)
    }
}
