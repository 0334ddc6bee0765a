#[path = "common/scenario.rs"]
mod scenario;

use approx::assert_abs_diff_eq;
use camreg::evaluation::{
    align_point_sets, compare_to_ground_truth, pose_rmsd, reprojection_rmse, AlignmentTransform, EvaluationError,
};
use camreg::registration::{CameraEstimate, PipelineOptions};
use camreg::simulator::{CameraTruth, NoiseConfig};
use camreg::{Pose, ScenarioGroundTruth};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use scenario::*;

fn estimate(id: u32, pose: Pose) -> CameraEstimate {
    CameraEstimate {
        camera_id: id,
        pose_world: pose,
        pose_looking_down: pose,
        n_aruco: 1,
        n_blob: 0,
        refined: false,
        report: None,
    }
}

fn random_cameras(n: usize, seed: u64) -> Vec<CameraEstimate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n as u32)
        .map(|id| {
            let t = Vector3::new(rng.random_range(0.0..40.0), rng.random_range(0.0..20.0), rng.random_range(3.0..4.0));
            let r = Pose::from_rpy(
                std::f64::consts::PI + rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-3.0..3.0),
                t,
            );
            estimate(id, r)
        })
        .collect()
}

fn points(cams: &[CameraEstimate]) -> Vec<(u32, Vector3<f64>)> {
    cams.iter().map(|c| (c.camera_id, *c.pose_world.translation())).collect()
}

fn moved(cams: &[CameraEstimate], g: &Pose) -> Vec<CameraEstimate> {
    cams.iter().map(|c| estimate(c.camera_id, *g * c.pose_world)).collect()
}

#[test]
fn zero_noise_refined_reprojection_is_exact() {
    let (_, data) = generate(&small_zero_noise());
    let res = calibrate(&data, &PipelineOptions::default());
    let report = reprojection_rmse(&res.cameras, &res.associated_blobs, &res.scaled_trajectory, &data.intrinsics);
    assert!(report.n_terms > 1000);
    assert!(report.rmse_px < 1e-6, "{}", report.rmse_px);
}

#[test]
fn reprojection_is_invariant_to_relabeling() {
    let (_, data) = generate(&small(NoiseConfig::default()));
    let res = calibrate(&data, &PipelineOptions::default());
    let base = reprojection_rmse(&res.cameras, &res.associated_blobs, &res.scaled_trajectory, &data.intrinsics);
    let relabel = |id: u32| 1000 - id;
    let cams: Vec<CameraEstimate> = res
        .cameras
        .iter()
        .map(|c| CameraEstimate { camera_id: relabel(c.camera_id), ..c.clone() })
        .collect();
    let blobs: Vec<_> = res
        .associated_blobs
        .iter()
        .map(|b| camreg::BlobDetection { camera_id: b.camera_id.map(relabel), ..*b })
        .collect();
    let other = reprojection_rmse(&cams, &blobs, &res.scaled_trajectory, &data.intrinsics);
    assert_eq!(base.rmse_px, other.rmse_px);
    assert_eq!(base.n_terms, other.n_terms);
    for (id, v) in &base.per_camera_rmse_px {
        assert_eq!(other.per_camera_rmse_px[&relabel(*id)], *v);
    }
}

#[test]
fn alignment_of_identical_sets_is_identity() {
    let cams = random_cameras(10, 1);
    let t = align_point_sets(&points(&cams), &points(&cams), false).unwrap();
    assert!(t.rotation.angle() < 1e-12);
    assert!(t.translation.norm() < 1e-10);
    assert_eq!(t.scale, 1.0);
}

#[test]
fn alignment_recovers_constructed_transform() {
    let cams = random_cameras(10, 2);
    let g = Pose::new(
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 30f64.to_radians()),
        Vector3::new(1.0, 2.0, 0.0),
    );
    let t = align_point_sets(&points(&cams), &points(&moved(&cams, &g)), false).unwrap();
    assert!(t.rotation.angle_to(g.rotation()) < 1e-10);
    assert!((t.translation - g.translation()).norm() < 1e-10);

    // Aligning back gives the inverse.
    let back = align_point_sets(&points(&moved(&cams, &g)), &points(&cams), false).unwrap();
    let inv = t.inverse();
    assert!(back.rotation.angle_to(&inv.rotation) < 1e-10);
    assert!((back.translation - inv.translation).norm() < 1e-10);
}

#[test]
fn alignment_with_noise_is_close() {
    let cams = random_cameras(40, 3);
    let g = Pose::from_rpy(0.1, -0.2, 2.0, Vector3::new(-3.0, 5.0, 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let target: Vec<(u32, Vector3<f64>)> = points(&moved(&cams, &g))
        .into_iter()
        .map(|(id, p)| (id, p + Vector3::from_fn(|_, _| noise.sample(&mut rng))))
        .collect();
    let t = align_point_sets(&points(&cams), &target, false).unwrap();
    assert!(t.rotation.angle_to(g.rotation()).to_degrees() < 0.1);
    assert!((t.translation - g.translation()).norm() < 0.02);
    let rms = (points(&cams)
        .iter()
        .zip(&target)
        .map(|((_, p), (_, q))| (t.apply(p) - q).norm_squared())
        .sum::<f64>()
        / 40.0)
        .sqrt();
    // Three noise components of 1 cm each.
    assert!(rms < 0.02 && rms > 0.01, "{rms}");
}

#[test]
fn similarity_alignment_recovers_scale() {
    let cams = random_cameras(10, 5);
    let src = points(&cams);
    let g = Pose::from_rpy(0.3, 0.2, -1.0, Vector3::new(1.0, -1.0, 2.0));
    let target: Vec<_> = src.iter().map(|(id, p)| (*id, g.transform_point(&(p * 1.5)))).collect();
    let t = align_point_sets(&src, &target, true).unwrap();
    assert_abs_diff_eq!(t.scale, 1.5, epsilon = 1e-10);
}

#[test]
fn alignment_errors() {
    let cams = random_cameras(10, 6);
    let pts = points(&cams);
    assert!(matches!(
        align_point_sets(&pts[..2], &pts[..2], false),
        Err(EvaluationError::TooFewCorrespondences { found: 2, needed: 3 })
    ));
    let line: Vec<_> = (0..5).map(|i| (i, Vector3::new(i as f64, 2.0 * i as f64, 0.0))).collect();
    assert_eq!(align_point_sets(&line, &line, false), Err(EvaluationError::DegenerateGeometry));
    // Only common ids count.
    let shifted: Vec<_> = pts.iter().map(|(id, p)| (id + 8, *p)).collect();
    assert!(matches!(
        align_point_sets(&pts, &shifted, false),
        Err(EvaluationError::TooFewCorrespondences { found: 2, .. })
    ));
}

#[test]
fn rmsd_of_a_set_with_itself_is_zero() {
    let cams = random_cameras(12, 7);
    let r = pose_rmsd(&cams, &cams).unwrap();
    assert_eq!(r.rot_rmsd_deg, [0.0; 3]);
    assert_eq!(r.trans_rmsd_m, [0.0; 3]);
    assert_eq!(r.n_matched, 12);
}

#[test]
fn rmsd_translation_is_invariant_under_common_motion() {
    let a = random_cameras(12, 8);
    let b: Vec<_> = random_cameras(12, 9)
        .iter()
        .zip(&a)
        .map(|(noise, c)| estimate(c.camera_id, c.pose_world * Pose::from_translation(noise.pose_world.translation() * 0.002)))
        .collect();
    let g = Pose::from_rpy(0.4, -0.3, 1.1, Vector3::new(10.0, -4.0, 2.0));
    let r1 = pose_rmsd(&a, &b).unwrap();
    let r2 = pose_rmsd(&moved(&a, &g), &moved(&b, &g)).unwrap();
    // Per-axis values are frame dependent; their sum of squares is not.
    let total = |r: [f64; 3]| r.iter().map(|v| v * v).sum::<f64>();
    assert!((total(r1.trans_rmsd_m) - total(r2.trans_rmsd_m)).abs() < 1e-9);
    let g_trans = Pose::from_translation(Vector3::new(3.0, 1.0, -2.0));
    let r3 = pose_rmsd(&moved(&a, &g_trans), &moved(&b, &g_trans)).unwrap();
    for k in 0..3 {
        assert!((r1.trans_rmsd_m[k] - r3.trans_rmsd_m[k]).abs() < 1e-9);
    }
}

#[test]
fn rmsd_reports_constructed_perturbation() {
    // Checkerboard of +-5 cm x shifts on a symmetric grid leaves the optimal
    // alignment untouched, so the x RMSD is exactly 5 cm.
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            let id = (i * 4 + j) as u32;
            let pose = Pose::from_rpy(std::f64::consts::PI, 0.0, 0.1 * id as f64, Vector3::new(i as f64 * 5.0, j as f64 * 4.0, 3.5));
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            a.push(estimate(id, pose));
            b.push(estimate(id, pose.with_translation(pose.translation() + Vector3::new(0.05 * sign, 0.0, 0.0))));
        }
    }
    let g = Pose::from_rpy(0.2, 0.1, -0.7, Vector3::new(3.0, 3.0, 1.0));
    let r = pose_rmsd(&a, &moved(&b, &g)).unwrap();
    assert_abs_diff_eq!(r.trans_rmsd_m[0], 0.05, epsilon = 1e-9);
    assert_abs_diff_eq!(r.trans_rmsd_m[1], 0.0, epsilon = 1e-9);
    assert_abs_diff_eq!(r.trans_rmsd_m[2], 0.0, epsilon = 1e-9);
    for v in r.rot_rmsd_deg {
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-7);
    }

    // A uniform shift is absorbed by the alignment.
    let shifted: Vec<_> = a
        .iter()
        .map(|c| estimate(c.camera_id, c.pose_world.with_translation(c.pose_world.translation() + Vector3::new(0.05, 0.0, 0.0))))
        .collect();
    let r = pose_rmsd(&a, &moved(&shifted, &g)).unwrap();
    assert!(r.trans_rmsd_m.iter().all(|v| *v < 1e-9));
}

fn truth_of(cams: &[CameraEstimate]) -> ScenarioGroundTruth {
    let (gt, _) = generate(&small_zero_noise());
    ScenarioGroundTruth {
        camera_poses_world: cams.iter().map(|c| CameraTruth { camera_id: c.camera_id, pose: c.pose_world }).collect(),
        ..gt
    }
}

#[test]
fn ground_truth_comparison_examples() {
    let cams = random_cameras(16, 10);
    let gt = truth_of(&cams);
    let r = compare_to_ground_truth(&cams, &gt, false).unwrap();
    assert_eq!(r.rot_rmsd_deg, [0.0; 3]);
    assert_eq!(r.trans_rmsd_m, [0.0; 3]);

    // One camera yawed by 2 degrees about the world z axis.
    let mut est = cams.clone();
    est[3].pose_world = Pose::from_rotation(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 2f64.to_radians()))
        .compose(&est[3].pose_world)
        .with_translation(*est[3].pose_world.translation());
    let r = compare_to_ground_truth(&est, &gt, false).unwrap();
    assert_abs_diff_eq!(r.rot_rmsd_deg[2], 2.0 / 16f64.sqrt(), epsilon = 1e-9);
    assert_abs_diff_eq!(r.rot_rmsd_deg[0], 0.0, epsilon = 1e-9);
    assert_abs_diff_eq!(r.rot_rmsd_deg[1], 0.0, epsilon = 1e-9);

    assert!(matches!(
        compare_to_ground_truth(&cams[..2], &gt, false),
        Err(EvaluationError::TooFewCorrespondences { found: 2, needed: 3 })
    ));
    let aligned = compare_to_ground_truth(&moved(&cams, &Pose::from_rpy(0.0, 0.0, 0.5, Vector3::x())), &gt, true).unwrap();
    assert!(aligned.trans_rmsd_m.iter().chain(&aligned.rot_rmsd_deg).all(|v| *v < 1e-7));
    assert_ne!(aligned.alignment, AlignmentTransform::identity());
}

#[test]
fn zero_noise_pipeline_matches_ground_truth() {
    let (gt, data) = generate(&small_zero_noise());
    let res = calibrate(&data, &PipelineOptions::default());
    let r = compare_to_ground_truth(&res.cameras, &gt, false).unwrap();
    for v in r.rot_rmsd_deg.iter().chain(&r.trans_rmsd_m) {
        assert!(*v < 1e-4, "{r:?}");
    }
}
