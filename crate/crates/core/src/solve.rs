//! Convex minimization primitives: damped Newton with backtracking line
//! search (optionally projected onto the nonnegative orthant) and
//! golden-section search.
//!
//! Objectives are extended-real valued: `f64::INFINITY` marks points outside
//! the effective domain, and the line search treats them as failed steps.

use nalgebra::{DMatrix, DVector};

/// Terminal state of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    DivergedToInfinity,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct SolveDiagnostics {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub status: SolveStatus,
    pub value: f64,
}

pub struct NewtonOptions {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    /// Restrict the iterate to `beta >= 0` componentwise (projected Newton).
    pub nonnegative: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { max_iterations: 200, gradient_tol: 1e-8, nonnegative: false }
    }
}

/// An objective with value, gradient, and Hessian evaluated at one point.
pub trait SmoothObjective {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn value_grad_hess(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>);
}

/// Minimizes a smooth convex objective by damped Newton with Armijo
/// backtracking, starting from `x0`. Convexity with compact sublevel sets is
/// the caller's guarantee; singular Hessians fall back to a ridge-regularized
/// step. With `nonnegative` set, iterates are projected onto the orthant and
/// convergence is measured by the projected gradient.
pub fn newton_minimize<O: SmoothObjective>(
    objective: &O,
    x0: &DVector<f64>,
    options: &NewtonOptions,
) -> (DVector<f64>, SolveDiagnostics) {
    let mut x = x0.clone();
    if options.nonnegative {
        project(&mut x);
    }
    let mut value = objective.value(&x);
    if !value.is_finite() {
        // Probe a handful of shrinking pulls toward the origin for a finite
        // start before declaring the domain empty from here.
        let mut found = false;
        for t in [0.5, 0.25, 0.1, 0.01, 0.001] {
            let cand = x0 * t;
            let v = objective.value(&cand);
            if v.is_finite() {
                x = cand;
                if options.nonnegative {
                    project(&mut x);
                }
                value = objective.value(&x);
                found = value.is_finite();
                break;
            }
        }
        if !found {
            return (
                x,
                SolveDiagnostics {
                    iterations: 0,
                    gradient_norm: f64::INFINITY,
                    status: SolveStatus::DivergedToInfinity,
                    value: f64::INFINITY,
                },
            );
        }
    }

    for iter in 0..options.max_iterations {
        let (v, grad, hess) = objective.value_grad_hess(&x);
        value = v;
        let active: Vec<bool> = if options.nonnegative {
            (0..x.len()).map(|j| x[j] <= 1e-14 && grad[j] > 0.0).collect()
        } else {
            vec![false; x.len()]
        };
        let mut eff_grad = grad.clone();
        for (j, &a) in active.iter().enumerate() {
            if a {
                eff_grad[j] = 0.0;
            }
        }
        let gnorm = eff_grad.norm();
        if gnorm <= options.gradient_tol {
            return (
                x,
                SolveDiagnostics {
                    iterations: iter,
                    gradient_norm: gnorm,
                    status: SolveStatus::Converged,
                    value,
                },
            );
        }

        let direction = newton_direction(&hess, &eff_grad, &active);
        // Backtracking with Armijo condition on the feasible (projected) step.
        let slope = grad.dot(&direction);
        let mut t = 1.0;
        let mut stepped = false;
        for _ in 0..60 {
            let mut cand = &x + t * &direction;
            if options.nonnegative {
                project(&mut cand);
            }
            let cand_value = objective.value(&cand);
            if cand_value.is_finite() && cand_value <= value + 1e-4 * t * slope {
                x = cand;
                value = cand_value;
                stepped = true;
                break;
            }
            t *= 0.5;
        }
        if !stepped {
            // No admissible descent step: either at the optimum up to
            // roundoff, or the domain blocks every direction.
            let status = if value.is_finite() {
                SolveStatus::Converged
            } else {
                SolveStatus::DivergedToInfinity
            };
            return (
                x,
                SolveDiagnostics { iterations: iter, gradient_norm: gnorm, status, value },
            );
        }
    }

    let (v, grad, _) = objective.value_grad_hess(&x);
    (
        x,
        SolveDiagnostics {
            iterations: options.max_iterations,
            gradient_norm: grad.norm(),
            status: SolveStatus::MaxIterations,
            value: v,
        },
    )
}

fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>, active: &[bool]) -> DVector<f64> {
    let n = grad.len();
    let mut h = hess.clone();
    for (j, &a) in active.iter().enumerate() {
        if a {
            for i in 0..n {
                h[(i, j)] = 0.0;
                h[(j, i)] = 0.0;
            }
            h[(j, j)] = 1.0;
        }
    }
    let scale = h.diagonal().amax().max(1e-12);
    let mut ridge = 0.0;
    loop {
        let mut reg = h.clone();
        for j in 0..n {
            reg[(j, j)] += ridge;
        }
        if let Some(chol) = reg.cholesky() {
            let d = chol.solve(&(-grad));
            if d.iter().all(|v| v.is_finite()) {
                return d;
            }
        }
        ridge = if ridge == 0.0 { 1e-10 * scale } else { ridge * 100.0 };
        if ridge > 1e6 * scale {
            return -grad.clone();
        }
    }
}

fn project(x: &mut DVector<f64>) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Golden-section minimization of a unimodal extended-real function on
/// `[lo, hi]`, to an interval of width `tol`. Infinite values are treated as
/// larger than any finite value.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if less(fc, fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

fn less(a: f64, b: f64) -> bool {
    match (a.is_finite(), b.is_finite()) {
        (true, false) => true,
        (false, _) => false,
        _ => a < b,
    }
}
