//! Box-constrained nonlinear least squares.
//!
//! Problems expose a residual vector and its Jacobian; the objective is
//! `f(x) = |r(x)|^2` with gradient `2 J^T r`. Solvers are interchangeable
//! strategies registered by name. Every accepted iterate satisfies the box
//! exactly and never increases `f` (Armijo sufficient decrease on the
//! projected path).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::registry::Registry;

pub trait LeastSquaresProblem {
    fn dim(&self) -> usize;

    /// `|r(x)|^2`.
    fn value(&self, x: &[f64]) -> f64;

    /// Residual vector and its Jacobian at `x`.
    fn residuals(&self, x: &[f64]) -> (DVector<f64>, DMatrix<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop when `|x - P(x - g)|` falls to this value.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step is this short.
    pub step_tolerance: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-10,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
    /// No step along the search path satisfied the Armijo condition.
    LineSearchStalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Objective at the start point and after every accepted step.
    pub trace: Vec<f64>,
    pub termination: Termination,
}

pub trait BoxSolver: Send + Sync {
    fn name(&self) -> &'static str;

    fn solve(
        &self,
        problem: &dyn LeastSquaresProblem,
        x0: &[f64],
        lower: &[f64],
        upper: &[f64],
        options: &SolverOptions,
    ) -> SolveReport;
}

pub const PROJECTED_GRADIENT: &str = "projected-gradient";
pub const PROJECTED_GAUSS_NEWTON: &str = "projected-gauss-newton";

pub fn solver_registry() -> Registry<dyn BoxSolver> {
    let mut reg: Registry<dyn BoxSolver> = Registry::new("solver");
    reg.register(PROJECTED_GRADIENT, Arc::new(ProjectedGradient));
    reg.register(PROJECTED_GAUSS_NEWTON, Arc::new(ProjectedGaussNewton));
    reg
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.max(*lo).min(*hi);
    }
}

fn gradient(r: &DVector<f64>, jac: &DMatrix<f64>) -> DVector<f64> {
    jac.tr_mul(r) * 2.0
}

fn projected_gradient_norm(x: &[f64], g: &DVector<f64>, lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .enumerate()
        .map(|(i, &xi)| {
            let stepped = (xi - g[i]).max(lower[i]).min(upper[i]);
            (xi - stepped).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

struct Iterate {
    x: Vec<f64>,
    f: f64,
    r: DVector<f64>,
    jac: DMatrix<f64>,
    g: DVector<f64>,
}

impl Iterate {
    /// `f` is taken from [`LeastSquaresProblem::value`] so that accepted
    /// values and line-search comparisons use one computation.
    fn at(problem: &dyn LeastSquaresProblem, x: Vec<f64>, f: Option<f64>) -> Self {
        let (r, jac) = problem.residuals(&x);
        let g = gradient(&r, &jac);
        Self {
            f: f.unwrap_or_else(|| problem.value(&x)),
            x,
            r,
            jac,
            g,
        }
    }
}

/// Backtracking (halving) along the projected path `P(x + alpha * d)`.
/// Returns the accepted point and its value.
fn projected_armijo(
    problem: &dyn LeastSquaresProblem,
    it: &Iterate,
    direction: &DVector<f64>,
    mut alpha: f64,
    lower: &[f64],
    upper: &[f64],
    c: f64,
) -> Option<(Vec<f64>, f64)> {
    const MAX_HALVINGS: usize = 60;
    for _ in 0..MAX_HALVINGS {
        let mut trial: Vec<f64> = it.x.iter().zip(direction.iter()).map(|(x, d)| x + alpha * d).collect();
        project(&mut trial, lower, upper);
        let decrease: f64 = it
            .g
            .iter()
            .zip(trial.iter().zip(&it.x))
            .map(|(g, (t, x))| g * (t - x))
            .sum();
        if decrease < 0.0 {
            let f_trial = problem.value(&trial);
            if f_trial <= it.f + c * decrease && f_trial <= it.f {
                return Some((trial, f_trial));
            }
        } else if decrease == 0.0 && trial == it.x {
            return None;
        }
        alpha *= 0.5;
    }
    None
}

/// Step length minimizing the Gauss-Newton model along `-g`.
fn cauchy_step(it: &Iterate) -> f64 {
    let jg = &it.jac * &it.g;
    let denom = 2.0 * jg.norm_squared();
    let num = it.g.norm_squared();
    if denom > 0.0 && num > 0.0 {
        num / denom
    } else {
        1.0
    }
}

/// Projected steepest descent with Barzilai-Borwein trial steps and Armijo
/// backtracking by halving.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectedGradient;

impl BoxSolver for ProjectedGradient {
    fn name(&self) -> &'static str {
        PROJECTED_GRADIENT
    }

    fn solve(
        &self,
        problem: &dyn LeastSquaresProblem,
        x0: &[f64],
        lower: &[f64],
        upper: &[f64],
        options: &SolverOptions,
    ) -> SolveReport {
        let mut x = x0.to_vec();
        project(&mut x, lower, upper);
        let mut it = Iterate::at(problem, x, None);
        let mut trace = vec![it.f];
        let mut alpha = cauchy_step(&it);
        let mut iterations = 0;
        let termination = loop {
            if projected_gradient_norm(&it.x, &it.g, lower, upper) <= options.gradient_tolerance {
                break Termination::GradientTolerance;
            }
            if iterations >= options.max_iterations {
                break Termination::MaxIterations;
            }
            let direction = -&it.g;
            let Some((x_new, f_new)) = projected_armijo(problem, &it, &direction, alpha, lower, upper, options.armijo)
            else {
                break Termination::LineSearchStalled;
            };
            iterations += 1;
            let step = dist(&x_new, &it.x);
            let next = Iterate::at(problem, x_new, Some(f_new));
            let s = DVector::from_iterator(next.x.len(), next.x.iter().zip(&it.x).map(|(a, b)| a - b));
            let y = &next.g - &it.g;
            let sy = s.dot(&y);
            it = next;
            trace.push(it.f);
            if step <= options.step_tolerance {
                break Termination::StepTolerance;
            }
            alpha = if sy > 0.0 { s.norm_squared() / sy } else { cauchy_step(&it) };
        };
        SolveReport {
            value: it.f,
            x: it.x,
            iterations,
            trace,
            termination,
        }
    }
}

/// Damped Gauss-Newton on the free variables (those not held at a bound
/// by the gradient), followed by projection and Armijo backtracking. Falls
/// back to a projected gradient step when the Newton path fails.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectedGaussNewton;

impl ProjectedGaussNewton {
    fn newton_direction(it: &Iterate, lower: &[f64], upper: &[f64]) -> Option<DVector<f64>> {
        let n = it.x.len();
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let at_lower = it.x[i] <= lower[i] && it.g[i] > 0.0;
                let at_upper = it.x[i] >= upper[i] && it.g[i] < 0.0;
                !(at_lower || at_upper)
            })
            .collect();
        if free.is_empty() {
            return None;
        }
        let jf = it.jac.select_columns(free.iter());
        let mut h = jf.tr_mul(&jf);
        let max_diag = h.diagonal().iter().fold(0.0f64, |m, v| m.max(*v));
        let damping = 1e-10 * (1.0 + max_diag);
        for i in 0..free.len() {
            h[(i, i)] += damping;
        }
        let rhs = -jf.tr_mul(&it.r);
        let df = h.cholesky()?.solve(&rhs);
        let mut d = DVector::zeros(n);
        for (k, &i) in free.iter().enumerate() {
            d[i] = df[k];
        }
        d.iter().all(|v| v.is_finite()).then_some(d)
    }
}

impl BoxSolver for ProjectedGaussNewton {
    fn name(&self) -> &'static str {
        PROJECTED_GAUSS_NEWTON
    }

    fn solve(
        &self,
        problem: &dyn LeastSquaresProblem,
        x0: &[f64],
        lower: &[f64],
        upper: &[f64],
        options: &SolverOptions,
    ) -> SolveReport {
        let mut x = x0.to_vec();
        project(&mut x, lower, upper);
        let mut it = Iterate::at(problem, x, None);
        let mut trace = vec![it.f];
        let mut iterations = 0;
        let termination = loop {
            if projected_gradient_norm(&it.x, &it.g, lower, upper) <= options.gradient_tolerance {
                break Termination::GradientTolerance;
            }
            if iterations >= options.max_iterations {
                break Termination::MaxIterations;
            }
            let newton = Self::newton_direction(&it, lower, upper)
                .and_then(|d| projected_armijo(problem, &it, &d, 1.0, lower, upper, options.armijo));
            let accepted = newton.or_else(|| {
                projected_armijo(problem, &it, &-&it.g, cauchy_step(&it), lower, upper, options.armijo)
            });
            let Some((x_new, f_new)) = accepted else {
                break Termination::LineSearchStalled;
            };
            iterations += 1;
            let step = dist(&x_new, &it.x);
            it = Iterate::at(problem, x_new, Some(f_new));
            trace.push(it.f);
            if step <= options.step_tolerance {
                break Termination::StepTolerance;
            }
        };
        SolveReport {
            value: it.f,
            x: it.x,
            iterations,
            trace,
            termination,
        }
    }
}
