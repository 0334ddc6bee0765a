mod common;

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use approx::assert_abs_diff_eq;
use camreg::geometry::{rotation_angle, slerp, GeometryError, TimedPose};
use camreg::{FisheyeIntrinsics, Pose, Projection, Trajectory};
use nalgebra::{UnitQuaternion, Vector3};

const CASES: u32 = 10_000;

macro_rules! property {
    ($name:ident, $f:path) => {
        #[test]
        fn $name() {
            $f(CASES).unwrap();
        }
    };
}

property!(quaternion_invariants, common::prop_quaternion_invariants);
property!(compose_is_associative, common::prop_compose_associative);
property!(compose_matches_matrix_product, common::prop_compose_matches_matrix_product);
property!(inverse_matches_matrix_inverse, common::prop_inverse_matches_matrix_inverse);
property!(ominus_zero_and_antisymmetric, common::prop_ominus_zero_and_antisymmetric);
property!(ominus_left_invariant, common::prop_ominus_left_invariant);
property!(slerp_angle_is_linear, common::prop_slerp_angle_linear);
property!(equidistant_projection_closed_form, common::prop_equidistant_projection);
property!(interpolation_is_continuous, common::prop_interpolation_continuous);

#[test]
fn identity_and_inverse_examples() {
    assert_eq!(Pose::identity() * Pose::identity(), Pose::identity());
    assert_eq!(Pose::identity().inverse(), Pose::identity());
    let up = Pose::from_translation(Vector3::new(0.0, 0.0, 2.0));
    assert_eq!(*up.inverse().translation(), Vector3::new(0.0, 0.0, -2.0));
}

#[test]
fn ominus_examples() {
    let b = Pose::from_rpy(0.3, -0.2, 1.0, Vector3::new(1.0, 2.0, 3.0));
    let a = b * Pose::from_translation(Vector3::new(0.1, 0.0, 0.0));
    let d = a.ominus(&b);
    assert_abs_diff_eq!(d.rho, Vector3::new(0.1, 0.0, 0.0), epsilon = 1e-12);
    assert_abs_diff_eq!(d.phi, Vector3::zeros(), epsilon = 1e-12);

    let a = b * Pose::from_rotation(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2));
    assert_abs_diff_eq!(a.ominus(&b).phi, Vector3::new(0.0, 0.0, FRAC_PI_2), epsilon = 1e-12);
}

#[test]
fn slerp_examples() {
    let q = UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3);
    assert_abs_diff_eq!(slerp(&q, &q, 0.5).angle_to(&q), 0.0, epsilon = 1e-12);
    let z90 = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
    let mid = slerp(&UnitQuaternion::identity(), &z90, 0.5);
    assert_abs_diff_eq!(mid.scaled_axis(), Vector3::new(0.0, 0.0, FRAC_PI_4), epsilon = 1e-12);
    assert_abs_diff_eq!(rotation_angle(&mid), FRAC_PI_4, epsilon = 1e-12);
}

fn two_keyframes(b: Pose) -> Trajectory {
    Trajectory::new(vec![
        TimedPose { stamp: 0.0, pose: Pose::identity(), keyframe_id: 10 },
        TimedPose { stamp: 2.0, pose: b, keyframe_id: 11 },
    ])
    .unwrap()
}

#[test]
fn interpolation_examples() {
    let traj = two_keyframes(Pose::from_translation(Vector3::new(2.0, 0.0, 0.0)));
    assert_eq!(traj.interpolate(0.0).unwrap(), Pose::identity());
    assert_abs_diff_eq!(*traj.interpolate(1.0).unwrap().translation(), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);

    let traj = two_keyframes(Pose::from_rotation(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), PI / 3.0)));
    let mid = traj.interpolate(1.0).unwrap();
    assert_abs_diff_eq!(mid.rotation().scaled_axis(), Vector3::new(0.0, 0.0, PI / 6.0), epsilon = 1e-12);

    assert!(matches!(traj.interpolate(2.5), Err(GeometryError::OutOfRange { .. })));
    assert!(matches!(traj.interpolate(-0.1), Err(GeometryError::OutOfRange { .. })));
}

#[test]
fn trajectory_rejects_bad_samples() {
    let tp = |stamp, id| TimedPose { stamp, pose: Pose::identity(), keyframe_id: id };
    assert!(Trajectory::new(vec![tp(1.0, 0), tp(1.0, 1)]).is_err());
    assert!(Trajectory::new(vec![tp(0.0, 0), tp(1.0, 0)]).is_err());
    assert!(Trajectory::new(vec![tp(-1.0, 0), tp(1.0, 1)]).is_err());
    assert!(Trajectory::new(vec![tp(0.0, 0), tp(f64::NAN, 1)]).is_err());
    let single = Trajectory::new(vec![tp(0.0, 0)]).unwrap();
    assert!(single.interpolate(0.0).is_err() || single.interpolate(0.0).unwrap() == Pose::identity());
}

#[test]
fn projection_examples() {
    let intr = FisheyeIntrinsics { k: [0.0; 4], ..FisheyeIntrinsics::default() };
    let cam = Pose::identity();
    assert_eq!(
        intr.project(&cam, &Vector3::new(0.0, 0.0, 1.0)),
        Projection::Visible(nalgebra::Vector2::new(intr.cx, intr.cy))
    );
    let theta = intr.max_fov / 2.0 + 0.01;
    let p = Vector3::new(theta.sin(), 0.0, theta.cos());
    assert_eq!(intr.project(&cam, &p), Projection::NotVisible);
    let px = intr.project(&cam, &Vector3::new(1.0, 0.0, 1.0)).pixel().unwrap();
    assert_abs_diff_eq!(px.x - intr.cx, intr.fx * FRAC_PI_4, epsilon = 1e-9);
    assert_abs_diff_eq!(px.y, intr.cy, epsilon = 1e-9);
    assert_eq!(intr.project(&cam, &Vector3::zeros()), Projection::NotVisible);
}
