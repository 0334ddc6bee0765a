#![allow(dead_code)]

use std::f64::consts::PI;

use camreg::geometry::{interpolate_between, rotation_angle, slerp, TimedPose};
use camreg::{FisheyeIntrinsics, Pose, Projection};
use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

pub type PropResult = Result<(), TestCaseError>;

/// Deterministic runner so failures replay across machines.
pub fn runner(cases: u32) -> TestRunner {
    let seed = [0x5a; 32];
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::from_seed(RngAlgorithm::ChaCha, &seed),
    )
}

pub fn check<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> PropResult,
) -> Result<(), String> {
    runner(cases)
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

pub fn unit_quaternion() -> impl Strategy<Value = UnitQuaternion<f64>> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("near-zero quaternion", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-2)
        .prop_map(|q| UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])))
}

pub fn translation() -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-10.0f64..10.0).prop_map(Vector3::from)
}

pub fn pose() -> impl Strategy<Value = Pose> {
    (unit_quaternion(), translation()).prop_map(|(q, t)| Pose::new(q, t))
}

fn max_abs(m: &Matrix4<f64>) -> f64 {
    m.amax()
}

fn is_canonical(q: &UnitQuaternion<f64>) -> bool {
    if q.w != 0.0 {
        return q.w > 0.0;
    }
    [q.i, q.j, q.k].into_iter().find(|c| *c != 0.0).is_some_and(|c| c > 0.0)
}

pub fn prop_quaternion_invariants(cases: u32) -> Result<(), String> {
    check(cases, (pose(), pose()), |(a, b)| {
        for p in [a, b, a * b, a.inverse(), b.retract(&a.ominus(&b))] {
            prop_assert!((p.rotation().norm() - 1.0).abs() < 1e-9);
            prop_assert!(is_canonical(p.rotation()), "{p:?}");
            let h = p.to_homogeneous();
            let r = h.fixed_view::<3, 3>(0, 0).into_owned();
            prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).amax() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
        Ok(())
    })
}

pub fn prop_compose_associative(cases: u32) -> Result<(), String> {
    check(cases, (pose(), pose(), pose()), |(a, b, c)| {
        let l = ((a * b) * c).to_homogeneous();
        let r = (a * (b * c)).to_homogeneous();
        prop_assert!(max_abs(&(l - r)) < 1e-10);
        Ok(())
    })
}

pub fn prop_compose_matches_matrix_product(cases: u32) -> Result<(), String> {
    check(cases, (pose(), pose()), |(a, b)| {
        let oracle = a.to_homogeneous() * b.to_homogeneous();
        prop_assert!(max_abs(&((a * b).to_homogeneous() - oracle)) < 1e-12);
        Ok(())
    })
}

pub fn prop_inverse_matches_matrix_inverse(cases: u32) -> Result<(), String> {
    check(cases, pose(), |a| {
        let oracle = a.to_homogeneous().try_inverse().unwrap();
        prop_assert!(max_abs(&(a.inverse().to_homogeneous() - oracle)) < 1e-12);
        let id = (a * a.inverse()).to_homogeneous();
        prop_assert!(max_abs(&(id - Matrix4::identity())) < 1e-12);
        Ok(())
    })
}

pub fn prop_ominus_zero_and_antisymmetric(cases: u32) -> Result<(), String> {
    check(cases, (pose(), pose()), |(a, b)| {
        prop_assert_eq!(a.ominus(&a).to_vector(), nalgebra::Vector6::zeros());
        let ab = a.ominus(&b);
        let ba = b.ominus(&a);
        if ab.phi.norm() < PI - 1e-6 {
            prop_assert!((ab.phi + ba.phi).norm() < 1e-12);
        }
        prop_assert!(ab.phi.norm() <= PI + 1e-15);
        if a != b {
            prop_assert!(ab.norm() > 0.0);
        }
        Ok(())
    })
}

pub fn prop_ominus_left_invariant(cases: u32) -> Result<(), String> {
    check(cases, (pose(), pose(), pose()), |(a, b, g)| {
        let d = (a.ominus(&b).norm() - (g * a).ominus(&(g * b)).norm()).abs();
        prop_assert!(d < 1e-10, "difference {d}");
        Ok(())
    })
}

pub fn prop_slerp_angle_linear(cases: u32) -> Result<(), String> {
    check(cases, (unit_quaternion(), unit_quaternion()), |(qa, qb)| {
        let total = rotation_angle(&(qa.inverse() * qb));
        let axis = (qa.inverse() * qb).scaled_axis();
        for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let rel = qa.inverse() * slerp(&qa, &qb, alpha);
            prop_assert!((rotation_angle(&rel) - alpha * total).abs() < 1e-10);
            if total < PI - 1e-6 {
                prop_assert!((rel.scaled_axis() - axis * alpha).norm() < 1e-10);
            }
        }
        prop_assert_eq!(slerp(&qa, &qb, 0.0), qa);
        prop_assert_eq!(slerp(&qa, &qb, 1.0), qb);
        Ok(())
    })
}

pub fn prop_equidistant_projection(cases: u32) -> Result<(), String> {
    let intr = FisheyeIntrinsics {
        k: [0.0; 4],
        fx: 380.0,
        fy: 372.0,
        ..FisheyeIntrinsics::default()
    };
    let half = intr.max_fov / 2.0;
    check(cases, (0.0..1.0f64, -PI..PI, 0.1..20.0f64), move |(frac, psi, dist)| {
        let theta = frac * half * 0.999;
        let p = Vector3::new(theta.sin() * psi.cos(), theta.sin() * psi.sin(), theta.cos()) * dist;
        let expected = Vector2::new(intr.cx + intr.fx * theta * psi.cos(), intr.cy + intr.fy * theta * psi.sin());
        match intr.project_camera_point(&p) {
            Projection::Visible(px) => prop_assert!((px - expected).norm() < 1e-9, "{px} vs {expected}"),
            Projection::NotVisible => {
                prop_assert!(theta == 0.0 || !intr.contains_pixel(&expected), "theta {theta}")
            }
        }
        Ok(())
    })
}

pub fn prop_interpolation_continuous(cases: u32) -> Result<(), String> {
    check(cases, (pose(), pose(), pose(), 0.01..5.0f64, 0.01..5.0f64), |(a, b, c, d1, d2)| {
        let i = TimedPose { stamp: 1.0, pose: a, keyframe_id: 0 };
        let j = TimedPose { stamp: 1.0 + d1, pose: b, keyframe_id: 1 };
        let k = TimedPose { stamp: 1.0 + d1 + d2, pose: c, keyframe_id: 2 };
        let left = interpolate_between(&i, &j, j.stamp);
        let right = interpolate_between(&j, &k, j.stamp);
        prop_assert_eq!(left.to_array(), right.to_array());
        prop_assert_eq!(left.to_array(), b.to_array());
        Ok(())
    })
}

pub type Property = (&'static str, fn(u32) -> Result<(), String>);

pub const GEOMETRY_PROPERTIES: &[Property] = &[
    ("quaternion norm, sign and rotation block", prop_quaternion_invariants),
    ("composition associativity", prop_compose_associative),
    ("composition against matrix product", prop_compose_matches_matrix_product),
    ("inverse against matrix inverse", prop_inverse_matches_matrix_inverse),
    ("ominus zero and antisymmetry", prop_ominus_zero_and_antisymmetric),
    ("ominus left invariance", prop_ominus_left_invariant),
    ("slerp angle linearity", prop_slerp_angle_linear),
    ("projector closed-form agreement", prop_equidistant_projection),
    ("interpolation continuity at keyframes", prop_interpolation_continuous),
];
