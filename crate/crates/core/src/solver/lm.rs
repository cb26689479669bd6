//! Levenberg-Marquardt driver on the normal equations with additive
//! `lambda * diag(JtJ)` damping.
//!
//! The driver is shared between the dense problems (corner reprojection,
//! pose fitting, toy problems) and the block-sparse photometric problem;
//! only the linear algebra behind [`LmModel`] differs.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("parameter vector has {got} entries, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("cost is not finite at the initial point")]
    NonFiniteInitialCost,
    #[error("{0}")]
    Evaluation(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    /// Relative cost decrease over an accepted step fell below tolerance.
    CostTolerance,
    /// Gradient infinity norm fell below tolerance.
    GradientTolerance,
    MaxIterations,
    /// No acceptable step was found before the damping limit.
    LambdaOverflow,
}

#[derive(Clone, Copy, Debug)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Terminate when an accepted step decreases the cost by less than this
    /// fraction.
    pub cost_tolerance: f64,
    /// Terminate when the gradient infinity norm drops below this.
    pub gradient_tolerance: f64,
    pub lambda_init: f64,
    /// Damping multiplier on rejection; divisor on acceptance.
    pub lambda_factor: f64,
    pub lambda_max: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 100,
            cost_tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            lambda_init: 1e-3,
            lambda_factor: 10.0,
            lambda_max: 1e12,
        }
    }
}

/// Outcome of one solve. The cost trace holds the initial cost followed by
/// the cost after each accepted step, so it is non-increasing by
/// construction.
#[derive(Clone, Debug)]
pub struct SolveReport {
    /// Number of accepted steps.
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: TerminationReason,
    pub cost_trace: Vec<f64>,
    /// Pixel evaluations that failed and were held at their last value
    /// (photometric problems only).
    pub failed_pixel_evals: usize,
    /// Set when the reduced global normal matrix looks rank deficient
    /// (for example fewer than two distinct board orientations).
    pub high_condition_warning: bool,
}

/// Linear-algebra backend for one LM run.
pub(crate) trait LmModel {
    /// Evaluate residuals and normal equations at `v`; returns the cost.
    fn prepare(&mut self, v: &DVector<f64>) -> Result<f64, SolveError>;
    /// Value-only cost at a candidate point. `Err` marks the candidate
    /// infeasible (the step is rejected, not the whole solve).
    fn cost(&mut self, v: &DVector<f64>) -> Result<f64, SolveError>;
    fn gradient_inf_norm(&self) -> f64;
    /// Solve `(JtJ + lambda diag(JtJ)) dv = -Jt r`; `None` asks the driver to
    /// raise the damping and retry.
    fn solve_step(&mut self, lambda: f64) -> Option<DVector<f64>>;
    /// (failed pixel evaluations, high-condition warning)
    fn diagnostics(&self) -> (usize, bool) {
        (0, false)
    }
}

pub(crate) fn run_lm<M: LmModel>(
    model: &mut M,
    v0: DVector<f64>,
    opts: &LmOptions,
) -> Result<(DVector<f64>, SolveReport), SolveError> {
    let mut v = v0;
    let mut cost = model.prepare(&v)?;
    if !cost.is_finite() {
        return Err(SolveError::NonFiniteInitialCost);
    }
    let initial_cost = cost;
    let mut trace = vec![cost];
    let mut lambda = opts.lambda_init;
    let mut iterations = 0;

    let termination = loop {
        if model.gradient_inf_norm() <= opts.gradient_tolerance {
            break TerminationReason::GradientTolerance;
        }
        if iterations >= opts.max_iterations {
            break TerminationReason::MaxIterations;
        }

        let mut accepted = None;
        while lambda <= opts.lambda_max {
            let step = model.solve_step(lambda);
            if let Some(dv) = step {
                if dv.iter().all(|x| x.is_finite()) {
                    let cand = &v + &dv;
                    if let Ok(c) = model.cost(&cand) {
                        if c.is_finite() && c < cost {
                            accepted = Some((cand, c));
                            break;
                        }
                    }
                }
            }
            lambda *= opts.lambda_factor;
        }

        let Some((cand, new_cost)) = accepted else {
            break TerminationReason::LambdaOverflow;
        };
        let rel_drop = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
        v = cand;
        cost = new_cost;
        trace.push(cost);
        iterations += 1;
        lambda = (lambda / opts.lambda_factor).max(1e-12);
        if rel_drop < opts.cost_tolerance {
            break TerminationReason::CostTolerance;
        }
        cost = model.prepare(&v)?;
    };

    let (failed, warn) = model.diagnostics();
    Ok((
        v,
        SolveReport {
            iterations,
            initial_cost,
            final_cost: cost,
            termination,
            cost_trace: trace,
            failed_pixel_evals: failed,
            high_condition_warning: warn,
        },
    ))
}

/// Dense model over residual/Jacobian closures, with optional frozen
/// parameters (rows and columns zeroed, unit diagonal, zero step).
pub(crate) struct DenseModel<R, J> {
    pub residual_fn: R,
    pub jacobian_fn: J,
    pub frozen: Vec<usize>,
    jtj: DMatrix<f64>,
    grad: DVector<f64>,
    inactive: Vec<bool>,
}

impl<R, J> DenseModel<R, J>
where
    R: FnMut(&DVector<f64>) -> Result<DVector<f64>, SolveError>,
    J: FnMut(&DVector<f64>) -> Result<DMatrix<f64>, SolveError>,
{
    pub fn new(residual_fn: R, jacobian_fn: J, dim: usize, frozen: Vec<usize>) -> Self {
        DenseModel {
            residual_fn,
            jacobian_fn,
            frozen,
            jtj: DMatrix::zeros(dim, dim),
            grad: DVector::zeros(dim),
            inactive: vec![false; dim],
        }
    }
}

impl<R, J> LmModel for DenseModel<R, J>
where
    R: FnMut(&DVector<f64>) -> Result<DVector<f64>, SolveError>,
    J: FnMut(&DVector<f64>) -> Result<DMatrix<f64>, SolveError>,
{
    fn prepare(&mut self, v: &DVector<f64>) -> Result<f64, SolveError> {
        let r = (self.residual_fn)(v)?;
        let j = (self.jacobian_fn)(v)?;
        if j.ncols() != v.len() || j.nrows() != r.len() {
            return Err(SolveError::Dimension {
                got: j.ncols(),
                expected: v.len(),
            });
        }
        self.jtj = j.transpose() * &j;
        self.grad = j.transpose() * &r;
        for f in self.inactive.iter_mut() {
            *f = false;
        }
        for &i in &self.frozen {
            self.inactive[i] = true;
        }
        // parameters with no residual support cannot move either
        for i in 0..v.len() {
            if self.jtj[(i, i)] == 0.0 {
                self.inactive[i] = true;
            }
        }
        for i in 0..v.len() {
            if self.inactive[i] {
                for k in 0..v.len() {
                    self.jtj[(i, k)] = 0.0;
                    self.jtj[(k, i)] = 0.0;
                }
                self.grad[i] = 0.0;
            }
        }
        Ok(r.iter().map(|x| x * x).sum())
    }

    fn cost(&mut self, v: &DVector<f64>) -> Result<f64, SolveError> {
        let r = (self.residual_fn)(v)?;
        Ok(r.iter().map(|x| x * x).sum())
    }

    fn gradient_inf_norm(&self) -> f64 {
        self.grad.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn solve_step(&mut self, lambda: f64) -> Option<DVector<f64>> {
        let n = self.grad.len();
        let mut a = self.jtj.clone();
        for i in 0..n {
            if self.inactive[i] {
                a[(i, i)] = 1.0;
            } else {
                a[(i, i)] += lambda * self.jtj[(i, i)];
            }
        }
        let chol = a.cholesky()?;
        Some(chol.solve(&(-&self.grad)))
    }
}

/// Classic Levenberg-Marquardt over closures producing the residual vector
/// and its Jacobian. See [`LmOptions`] for the damping schedule and the
/// termination rules.
pub fn levenberg_marquardt<R, J>(
    mut residual_fn: R,
    mut jacobian_fn: J,
    v0: DVector<f64>,
    opts: &LmOptions,
) -> Result<(DVector<f64>, SolveReport), SolveError>
where
    R: FnMut(&DVector<f64>) -> Result<DVector<f64>, SolveError>,
    J: FnMut(&DVector<f64>) -> Result<DMatrix<f64>, SolveError>,
{
    let dim = v0.len();
    let mut model = DenseModel::new(&mut residual_fn, &mut jacobian_fn, dim, Vec::new());
    run_lm(&mut model, v0, opts)
}

/// Asserts the accepted-step invariant of a report.
pub fn assert_cost_trace_non_increasing(report: &SolveReport) {
    for w in report.cost_trace.windows(2) {
        assert!(w[1] <= w[0], "cost trace increased: {} -> {}", w[0], w[1]);
    }
}
