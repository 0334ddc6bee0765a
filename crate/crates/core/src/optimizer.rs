//! Levenberg-Marquardt for small and medium dense problems with robust losses.
//!
//! A [`Problem`] holds parameter blocks (Euclidean vectors, scalars or SE(3)
//! poses) and residual blocks that read some of them. Jacobians are taken by
//! central differences in each block's tangent space; SE(3) blocks are stored
//! as `[qw, qx, qy, qz, tx, ty, tz]` and updated through [`Pose::retract`].
//!
//! Robust losses are applied by iteratively reweighting each residual block by
//! `rho'(|r|^2)`. Block evaluations run on the rayon pool but are reduced in
//! block order, so a solve is bit-reproducible.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Tangent6};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("residual block {block} evaluated to a non-finite value")]
    NonFiniteResidual { block: usize },
    #[error("residual block references unknown parameter block {0}")]
    UnknownParameterBlock(usize),
    #[error("parameter block {block} has {got} values, manifold needs {expected}")]
    BadParameterSize {
        block: usize,
        expected: usize,
        got: usize,
    },
    #[error("parameter block {0} holds non-finite values")]
    NonFiniteParameter(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    None,
    Huber,
    Cauchy,
}

/// `rho(s)` applied to the squared norm `s` of a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustLoss {
    pub kind: LossKind,
    pub scale: f64,
}

impl RobustLoss {
    pub const NONE: RobustLoss = RobustLoss {
        kind: LossKind::None,
        scale: 1.0,
    };

    pub fn huber(delta: f64) -> Self {
        assert!(delta > 0.0, "huber delta must be positive");
        Self {
            kind: LossKind::Huber,
            scale: delta,
        }
    }

    pub fn cauchy(c: f64) -> Self {
        assert!(c > 0.0, "cauchy scale must be positive");
        Self {
            kind: LossKind::Cauchy,
            scale: c,
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self.kind {
            LossKind::None => s,
            LossKind::Huber => {
                let d2 = self.scale * self.scale;
                if s <= d2 {
                    s
                } else {
                    2.0 * self.scale * s.sqrt() - d2
                }
            }
            LossKind::Cauchy => {
                let c2 = self.scale * self.scale;
                c2 * (s / c2).ln_1p()
            }
        }
    }

    /// `d rho / d s`
    pub fn derivative(&self, s: f64) -> f64 {
        match self.kind {
            LossKind::None => 1.0,
            LossKind::Huber => {
                if s <= self.scale * self.scale {
                    1.0
                } else {
                    self.scale / s.sqrt()
                }
            }
            LossKind::Cauchy => 1.0 / (1.0 + s / (self.scale * self.scale)),
        }
    }
}

/// How a parameter block is perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manifold {
    /// Plain vector of any length.
    Euclidean,
    /// Single value.
    Scalar,
    /// `[qw, qx, qy, qz, tx, ty, tz]`, 6-dof tangent.
    Se3,
}

impl Manifold {
    pub fn ambient_size(&self, len: usize) -> usize {
        match self {
            Manifold::Euclidean => len,
            Manifold::Scalar => 1,
            Manifold::Se3 => 7,
        }
    }

    pub fn tangent_size(&self, len: usize) -> usize {
        match self {
            Manifold::Euclidean => len,
            Manifold::Scalar => 1,
            Manifold::Se3 => 6,
        }
    }

    /// `x [+] delta`
    pub fn plus(&self, x: &[f64], delta: &[f64]) -> Vec<f64> {
        match self {
            Manifold::Euclidean | Manifold::Scalar => {
                x.iter().zip(delta).map(|(a, b)| a + b).collect()
            }
            Manifold::Se3 => {
                let pose = Pose::from_slice(x).unwrap_or_default();
                let d = Tangent6::from_vector(&nalgebra::Vector6::from_column_slice(delta));
                pose.retract(&d).to_array().to_vec()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(usize);

impl BlockId {
    pub fn index(&self) -> usize {
        self.0
    }
}

pub type ResidualFn = dyn Fn(&[&[f64]]) -> DVector<f64> + Send + Sync;

struct ParameterBlock {
    values: Vec<f64>,
    manifold: Manifold,
    constant: bool,
}

struct ResidualBlock {
    blocks: Vec<BlockId>,
    loss: RobustLoss,
    f: Box<ResidualFn>,
}

/// A least-squares problem `min sum_i rho_i(|r_i(x)|^2)`.
#[derive(Default)]
pub struct Problem {
    params: Vec<ParameterBlock>,
    residuals: Vec<ResidualBlock>,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_parameter_block(
        &mut self,
        values: Vec<f64>,
        manifold: Manifold,
    ) -> Result<BlockId, SolverError> {
        let block = self.params.len();
        let expected = manifold.ambient_size(values.len());
        if values.len() != expected || values.is_empty() {
            return Err(SolverError::BadParameterSize {
                block,
                expected,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFiniteParameter(block));
        }
        let values = match manifold {
            Manifold::Se3 => Pose::from_slice(&values)
                .map_err(|_| SolverError::NonFiniteParameter(block))?
                .to_array()
                .to_vec(),
            _ => values,
        };
        self.params.push(ParameterBlock {
            values,
            manifold,
            constant: false,
        });
        Ok(BlockId(block))
    }

    pub fn add_pose_block(&mut self, pose: &Pose) -> BlockId {
        self.add_parameter_block(pose.to_array().to_vec(), Manifold::Se3)
            .expect("finite pose")
    }

    pub fn set_constant(&mut self, id: BlockId, constant: bool) {
        self.params[id.0].constant = constant;
    }

    pub fn add_residual_block<F>(
        &mut self,
        blocks: &[BlockId],
        loss: RobustLoss,
        f: F,
    ) -> Result<(), SolverError>
    where
        F: Fn(&[&[f64]]) -> DVector<f64> + Send + Sync + 'static,
    {
        if let Some(b) = blocks.iter().find(|b| b.0 >= self.params.len()) {
            return Err(SolverError::UnknownParameterBlock(b.0));
        }
        self.residuals.push(ResidualBlock {
            blocks: blocks.to_vec(),
            loss,
            f: Box::new(f),
        });
        Ok(())
    }

    pub fn values(&self, id: BlockId) -> &[f64] {
        &self.params[id.0].values
    }

    pub fn pose(&self, id: BlockId) -> Pose {
        Pose::from_slice(self.values(id)).expect("SE3 block")
    }

    pub fn num_residual_blocks(&self) -> usize {
        self.residuals.len()
    }

    /// Robustified cost at the current parameters.
    pub fn cost(&self) -> Result<f64, SolverError> {
        let state: Vec<&[f64]> = self.params.iter().map(|p| p.values.as_slice()).collect();
        self.cost_at(&state)
    }

    fn cost_at(&self, state: &[&[f64]]) -> Result<f64, SolverError> {
        let parts: Vec<Result<f64, SolverError>> = self
            .residuals
            .par_iter()
            .enumerate()
            .map(|(i, rb)| {
                let args: Vec<&[f64]> = rb.blocks.iter().map(|b| state[b.0]).collect();
                let r = (rb.f)(&args);
                let s = r.norm_squared();
                if s.is_finite() {
                    Ok(rb.loss.eval(s))
                } else {
                    Err(SolverError::NonFiniteResidual { block: i })
                }
            })
            .collect();
        let mut total = 0.0;
        for p in parts {
            total += p?;
        }
        Ok(total)
    }
}

/// Central-difference Jacobian of `f` with respect to the tangent
/// coordinates of every block in `params`, columns stacked in block order.
pub fn numerical_jacobian(
    f: &ResidualFn,
    params: &[&[f64]],
    manifolds: &[Manifold],
) -> Result<DMatrix<f64>, SolverError> {
    let free = vec![true; params.len()];
    block_jacobian(f, params, manifolds, &free, 0)
}

const JACOBIAN_STEP: f64 = 1e-6;

/// Relative size of cost changes treated as evaluation round-off. Accepted
/// steps never raise the cost by more than this fraction.
pub const ROUNDOFF: f64 = 16.0 * f64::EPSILON;

fn block_jacobian(
    f: &ResidualFn,
    params: &[&[f64]],
    manifolds: &[Manifold],
    free: &[bool],
    block: usize,
) -> Result<DMatrix<f64>, SolverError> {
    let r0 = f(params);
    if r0.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteResidual { block });
    }
    let dims: Vec<usize> = params
        .iter()
        .zip(manifolds)
        .zip(free)
        .map(|((p, m), &fr)| if fr { m.tangent_size(p.len()) } else { 0 })
        .collect();
    let mut jac = DMatrix::zeros(r0.len(), dims.iter().sum());
    let mut col = 0;
    for (k, (&dim, manifold)) in dims.iter().zip(manifolds).enumerate() {
        let mut delta = vec![0.0; dim];
        for i in 0..dim {
            delta[i] = JACOBIAN_STEP;
            let plus = manifold.plus(params[k], &delta);
            delta[i] = -JACOBIAN_STEP;
            let minus = manifold.plus(params[k], &delta);
            delta[i] = 0.0;
            let mut args = params.to_vec();
            args[k] = &plus;
            let rp = f(&args);
            args[k] = &minus;
            let rm = f(&args);
            if rp.iter().chain(rm.iter()).any(|v| !v.is_finite()) {
                return Err(SolverError::NonFiniteResidual { block });
            }
            // Vector blocks divide by the step actually represented in
            // floating point, which keeps linear residuals exact.
            let width = match manifold {
                Manifold::Euclidean | Manifold::Scalar => plus[i] - minus[i],
                Manifold::Se3 => 2.0 * JACOBIAN_STEP,
            };
            jac.set_column(col, &((rp - rm) / width));
            col += 1;
        }
    }
    Ok(jac)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// On the infinity norm of `sum rho' J^T r`.
    pub gradient_tol: f64,
    /// On the step norm relative to the parameter norm.
    pub param_tol: f64,
    /// On the relative cost decrease of an accepted step.
    pub function_tol: f64,
    pub initial_lambda: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            gradient_tol: 1e-10,
            param_tol: 1e-14,
            function_tol: 1e-12,
            initial_lambda: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    ZeroCost,
    GradientTolerance,
    ParameterTolerance,
    FunctionTolerance,
    /// No damped step decreased the cost before lambda hit its ceiling.
    DampingLimit,
    MaxIterationsReached,
    NoFreeParameters,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination_reason: TerminationReason,
}

const LAMBDA_MIN: f64 = 1e-12;
const LAMBDA_MAX: f64 = 1e6;

struct Linearization {
    hessian: DMatrix<f64>,
    gradient: DVector<f64>,
}

impl Problem {
    /// Free blocks and the offset of each one's tangent coordinates.
    fn layout(&self) -> (Vec<Option<usize>>, usize) {
        let mut offsets = Vec::with_capacity(self.params.len());
        let mut n = 0;
        for p in &self.params {
            if p.constant {
                offsets.push(None);
            } else {
                offsets.push(Some(n));
                n += p.manifold.tangent_size(p.values.len());
            }
        }
        (offsets, n)
    }

    fn linearize(&self, offsets: &[Option<usize>], n: usize) -> Result<Linearization, SolverError> {
        let state: Vec<&[f64]> = self.params.iter().map(|p| p.values.as_slice()).collect();
        let parts: Vec<Result<(DVector<f64>, DMatrix<f64>, f64), SolverError>> = self
            .residuals
            .par_iter()
            .enumerate()
            .map(|(i, rb)| {
                let args: Vec<&[f64]> = rb.blocks.iter().map(|b| state[b.0]).collect();
                let manifolds: Vec<Manifold> =
                    rb.blocks.iter().map(|b| self.params[b.0].manifold).collect();
                let free: Vec<bool> = rb.blocks.iter().map(|b| offsets[b.0].is_some()).collect();
                let r = (rb.f)(&args);
                let jac = block_jacobian(rb.f.as_ref(), &args, &manifolds, &free, i)?;
                let w = rb.loss.derivative(r.norm_squared());
                Ok((r, jac, w))
            })
            .collect();

        let mut hessian = DMatrix::zeros(n, n);
        let mut gradient = DVector::zeros(n);
        for (rb, part) in self.residuals.iter().zip(parts) {
            let (r, jac, w) = part?;
            // map local columns to global tangent offsets
            let mut cols = Vec::with_capacity(jac.ncols());
            for b in &rb.blocks {
                if let Some(off) = offsets[b.0] {
                    let p = &self.params[b.0];
                    cols.extend(off..off + p.manifold.tangent_size(p.values.len()));
                }
            }
            let jtj = jac.transpose() * &jac * w;
            let jtr = jac.transpose() * &r * w;
            for (a, &ga) in cols.iter().enumerate() {
                gradient[ga] += jtr[a];
                for (b, &gb) in cols.iter().enumerate() {
                    hessian[(ga, gb)] += jtj[(a, b)];
                }
            }
        }
        Ok(Linearization { hessian, gradient })
    }

    fn apply_step(&self, offsets: &[Option<usize>], step: &DVector<f64>) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .zip(offsets)
            .map(|(p, off)| match off {
                Some(off) => {
                    let dim = p.manifold.tangent_size(p.values.len());
                    p.manifold.plus(&p.values, &step.as_slice()[*off..off + dim])
                }
                None => p.values.clone(),
            })
            .collect()
    }
}

/// State after an accepted step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationSummary {
    pub iteration: usize,
    pub cost_before: f64,
    pub cost: f64,
    pub lambda: f64,
}

/// Minimizes the problem in place.
///
/// Errors only when the starting point cannot be evaluated; hitting the
/// iteration cap is reported through [`SolveReport::converged`].
pub fn solve(problem: &mut Problem, opts: &SolverOptions) -> Result<SolveReport, SolverError> {
    solve_observed(problem, opts, &mut |_, _| {})
}

/// [`solve`], calling `observer` after every accepted step.
pub fn solve_observed(
    problem: &mut Problem,
    opts: &SolverOptions,
    observer: &mut dyn FnMut(&IterationSummary, &Problem),
) -> Result<SolveReport, SolverError> {
    let mut cost = problem.cost()?;
    let initial_cost = cost;
    let (offsets, n) = problem.layout();
    let report = |iterations, final_cost, reason| SolveReport {
        converged: reason != TerminationReason::MaxIterationsReached,
        iterations,
        initial_cost,
        final_cost,
        termination_reason: reason,
    };
    if n == 0 {
        return Ok(report(0, cost, TerminationReason::NoFreeParameters));
    }
    if cost == 0.0 {
        return Ok(report(0, cost, TerminationReason::ZeroCost));
    }

    let mut lambda = opts.initial_lambda.clamp(LAMBDA_MIN, LAMBDA_MAX);
    let mut last_roundoff_step: Option<f64> = None;
    for iter in 0..opts.max_iters {
        let lin = problem.linearize(&offsets, n)?;
        if lin.gradient.amax() < opts.gradient_tol {
            return Ok(report(iter, cost, TerminationReason::GradientTolerance));
        }
        let max_diag = lin.hessian.diagonal().amax();
        let diag_floor = (1e-9 * max_diag).max(1e-6);
        let damping: DVector<f64> = lin.hessian.diagonal().map(|d| d.clamp(diag_floor, 1e32));
        let x_norm: f64 = problem
            .params
            .iter()
            .filter(|p| !p.constant)
            .flat_map(|p| p.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();

        loop {
            let mut lhs = lin.hessian.clone();
            for i in 0..n {
                lhs[(i, i)] += lambda * damping[i];
            }
            let Some(chol) = lhs.cholesky() else {
                if lambda >= LAMBDA_MAX {
                    return Ok(report(iter + 1, cost, TerminationReason::DampingLimit));
                }
                lambda = (lambda * 10.0).min(LAMBDA_MAX);
                continue;
            };
            let step = chol.solve(&(-&lin.gradient));
            if step.norm() <= opts.param_tol * (x_norm + opts.param_tol) {
                return Ok(report(iter + 1, cost, TerminationReason::ParameterTolerance));
            }
            let candidate = problem.apply_step(&offsets, &step);
            let refs: Vec<&[f64]> = candidate.iter().map(Vec::as_slice).collect();
            let new_cost = problem.cost_at(&refs).unwrap_or(f64::INFINITY);
            let predicted = -(lin.gradient.dot(&step) + 0.5 * step.dot(&(&lin.hessian * &step)));
            let noise = ROUNDOFF * cost;
            let step_norm = step.norm();
            let accept = if new_cost < cost - noise {
                last_roundoff_step = None;
                true
            } else if new_cost <= cost + noise && predicted <= noise {
                // Cost changes are below evaluation round-off: follow the
                // model while its steps keep shrinking.
                if last_roundoff_step.is_some_and(|prev| step_norm > 0.5 * prev) {
                    return Ok(report(iter + 1, cost, TerminationReason::FunctionTolerance));
                }
                last_roundoff_step = Some(step_norm);
                true
            } else {
                false
            };
            if accept {
                for (p, v) in problem.params.iter_mut().zip(candidate) {
                    p.values = v;
                }
                let rel = (cost - new_cost) / cost;
                let cost_before = cost;
                cost = new_cost;
                lambda = (lambda / 3.0).max(LAMBDA_MIN);
                observer(
                    &IterationSummary {
                        iteration: iter,
                        cost_before,
                        cost,
                        lambda,
                    },
                    problem,
                );
                if cost == 0.0 {
                    return Ok(report(iter + 1, cost, TerminationReason::ZeroCost));
                }
                if last_roundoff_step.is_none() && rel < opts.function_tol {
                    return Ok(report(iter + 1, cost, TerminationReason::FunctionTolerance));
                }
                break;
            }
            if lambda >= LAMBDA_MAX {
                return Ok(report(iter + 1, cost, TerminationReason::DampingLimit));
            }
            lambda = (lambda * 10.0).min(LAMBDA_MAX);
        }
    }
    Ok(report(opts.max_iters, cost, TerminationReason::MaxIterationsReached))
}
