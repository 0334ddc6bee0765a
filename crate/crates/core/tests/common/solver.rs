#![allow(dead_code)]

//! Solver fixtures shared by the optimizer tests and the acceptance run.

use camreg::optimizer::{numerical_jacobian, solve, Manifold, Problem, RobustLoss, SolverOptions};
use camreg::Pose;
use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Largest deviation between the solver's central-difference Jacobian of an
/// ominus-based pose residual and a forward-difference oracle (step 1e-8)
/// written independently on the 4x4 matrix representation.
pub fn jacobian_oracle_error(trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let target = random_pose(&mut rng);
        let meas = random_pose(&mut rng);
        let x = random_pose(&mut rng);
        let f = move |p: &[&[f64]]| {
            let x = Pose::from_slice(p[0]).unwrap();
            DVector::from_column_slice((x * meas).ominus(&target).to_vector().as_slice())
        };
        let arr = x.to_array();
        let jac = numerical_jacobian(&f, &[&arr], &[Manifold::Se3]).unwrap();

        // Oracle: perturb through the homogeneous matrix exponential of a
        // right twist with decoupled translation, then evaluate directly.
        let eval = |p: &Pose| {
            let rel = target.to_homogeneous().try_inverse().unwrap() * p.to_homogeneous() * meas.to_homogeneous();
            let r = nalgebra::Rotation3::from_matrix(&rel.fixed_view::<3, 3>(0, 0).into_owned());
            let mut v = Vector6::zeros();
            v.fixed_rows_mut::<3>(0).copy_from(&rel.fixed_view::<3, 1>(0, 3));
            v.fixed_rows_mut::<3>(3).copy_from(&r.scaled_axis());
            v
        };
        let h = 1e-8;
        let base = eval(&x);
        let mut oracle = DMatrix::zeros(6, 6);
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let rot = nalgebra::UnitQuaternion::from_scaled_axis(d.fixed_rows::<3>(3).into_owned());
            let moved = Pose::new(x.rotation() * rot, x.translation() + x.rotation() * d.fixed_rows::<3>(0));
            oracle.set_column(k, &((eval(&moved) - base) / h));
        }
        worst = worst.max((jac - oracle).amax());
    }
    worst
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let rv = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    Pose::from_parts(rv, t)
}

/// Fits `y = a x + b` to ten exact points from a poor start.
pub fn linear_fit() -> (f64, f64) {
    let (a, b) = (1.7, -0.4);
    let mut problem = Problem::new();
    let p = problem.add_parameter_block(vec![10.0, 10.0], Manifold::Euclidean).unwrap();
    for i in 0..10 {
        let x = i as f64 * 0.5;
        let y = a * x + b;
        problem
            .add_residual_block(&[p], RobustLoss::NONE, move |v| DVector::from_element(1, v[0][0] * x + v[0][1] - y))
            .unwrap();
    }
    let report = solve(&mut problem, &SolverOptions::default()).unwrap();
    assert!(report.converged);
    let v = problem.values(p);
    ((v[0] - a).abs(), (v[1] - b).abs())
}

/// Rosenbrock residuals `(10 (y - x^2), 1 - x)` from `(-1.2, 1)`.
pub fn rosenbrock() -> [f64; 2] {
    let mut problem = Problem::new();
    let p = problem.add_parameter_block(vec![-1.2, 1.0], Manifold::Euclidean).unwrap();
    problem
        .add_residual_block(&[p], RobustLoss::NONE, |v| {
            let (x, y) = (v[0][0], v[0][1]);
            DVector::from_vec(vec![10.0 * (y - x * x), 1.0 - x])
        })
        .unwrap();
    solve(&mut problem, &SolverOptions::default()).unwrap();
    let v = problem.values(p);
    [v[0], v[1]]
}

/// Line `y = a x + b` with Gaussian noise and a fraction of symmetric gross
/// outliers. Returns the parameter error for (no outliers, Huber, no loss).
pub fn robust_line_fit(seed: u64, outlier_fraction: f64) -> (f64, f64, f64) {
    let (a, b) = (0.8, 1.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let n = 200;
    let xs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 * 10.0).collect();
    let clean: Vec<f64> = xs.iter().map(|x| a * x + b + noise.sample(&mut rng)).collect();
    let mut dirty = clean.clone();
    for (i, y) in dirty.iter_mut().enumerate() {
        if rng.random::<f64>() < outlier_fraction {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            *y += sign * rng.random_range(5.0..15.0) * (1.0 + xs[i] / 5.0);
        }
    }
    let fit = |ys: &[f64], loss: RobustLoss| {
        let mut problem = Problem::new();
        let p = problem.add_parameter_block(vec![0.0, 0.0], Manifold::Euclidean).unwrap();
        for (&x, &y) in xs.iter().zip(ys) {
            problem
                .add_residual_block(&[p], loss, move |v| DVector::from_element(1, v[0][0] * x + v[0][1] - y))
                .unwrap();
        }
        solve(&mut problem, &SolverOptions::default()).unwrap();
        let v = problem.values(p);
        ((v[0] - a).powi(2) + (v[1] - b).powi(2)).sqrt()
    };
    (
        fit(&clean, RobustLoss::NONE),
        fit(&dirty, RobustLoss::huber(0.2)),
        fit(&dirty, RobustLoss::NONE),
    )
}
