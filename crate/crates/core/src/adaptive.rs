//! Adaptive rules in the normalized scalar experiment: lambda grids,
//! pointwise-optimal risk curves, shrinkage families, adaptive regret, and
//! minimax spline optimization.
//!
//! Everything here works in the normalized scalar experiment (`I0 = 1`,
//! `Psi = -1`, `K = 1`) under squared loss with full moment constraints, so
//! the limit problem is described by `Omega = Var(Y) > 1` alone. The
//! adaptive regret of a rule is its worst risk ratio against the
//! lambda-by-lambda optimum over a grid of penalty weights.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::experiment::LimitExperimentConfig;
use crate::quad::{gauss_hermite, log_sum_exp, IntegratorSettings};
use crate::risk::{infinite_m_risk, LossSpec, RuleSpec};
use crate::rules::{scalar_c_bracket, scalar_linear_risk};
use crate::solve::golden_section;
use crate::{Error, Result};

/// Default number of grid points: quarter steps in log lambda over [-3, 6].
pub const DEFAULT_GRID_POINTS: usize = 37;

/// An increasing grid of penalty weights, evenly spaced in log lambda.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    pub log_values: Vec<f64>,
    pub values: Vec<f64>,
}

impl LambdaGrid {
    pub const LOG_MIN: f64 = -3.0;
    pub const LOG_MAX: f64 = 6.0;

    /// `n_points` evenly spaced in log lambda over `[-3, 6]`, hitting the
    /// endpoints `e^-3` and `e^6` exactly.
    pub fn new(n_points: usize) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::config("grid needs at least 2 points"));
        }
        let step = (Self::LOG_MAX - Self::LOG_MIN) / (n_points - 1) as f64;
        let mut log_values: Vec<f64> =
            (0..n_points).map(|i| Self::LOG_MIN + step * i as f64).collect();
        log_values[n_points - 1] = Self::LOG_MAX;
        Ok(Self::from_log_values(log_values).expect("constructed increasing"))
    }

    pub fn default_grid() -> Self {
        Self::new(DEFAULT_GRID_POINTS).expect("default grid is valid")
    }

    /// An arbitrary strictly increasing grid of log lambda values.
    pub fn from_log_values(log_values: Vec<f64>) -> Result<Self> {
        if log_values.is_empty() {
            return Err(Error::config("grid must be nonempty"));
        }
        if log_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("grid must be strictly increasing"));
        }
        let values = log_values.iter().map(|l| l.exp()).collect();
        Ok(Self { log_values, values })
    }

    pub fn single(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::config("lambda must be positive"));
        }
        Ok(Self { log_values: vec![lambda.ln()], values: vec![lambda] })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-lambda risks of a rule against the pointwise optimum, the risk
/// ratios, and the adaptive regret (the largest finite ratio).
#[derive(Debug, Clone)]
pub struct AdaptiveReport {
    pub grid: LambdaGrid,
    pub risk_rule: Vec<f64>,
    pub risk_opt: Vec<f64>,
    pub ratio: Vec<f64>,
    pub regret: f64,
    pub argmax_lambda: f64,
    /// False when the rule diverges somewhere on the grid; such entries are
    /// excluded from `regret` but poison any tuning objective.
    pub all_finite: bool,
    pub solver_converged: bool,
}

impl AdaptiveReport {
    fn from_risks(grid: LambdaGrid, risk_rule: Vec<f64>, risk_opt: Vec<f64>) -> Self {
        let ratio: Vec<f64> =
            risk_rule.iter().zip(&risk_opt).map(|(r, o)| r / o).collect();
        let mut regret = f64::NEG_INFINITY;
        let mut argmax_lambda = grid.values[0];
        let mut all_finite = true;
        for i in 0..grid.len() {
            if risk_rule[i].is_finite() {
                if ratio[i] > regret {
                    regret = ratio[i];
                    argmax_lambda = grid.values[i];
                }
            } else {
                all_finite = false;
            }
        }
        if !regret.is_finite() {
            regret = f64::INFINITY;
        }
        Self {
            grid,
            risk_rule,
            risk_opt,
            ratio,
            regret,
            argmax_lambda,
            all_finite,
            solver_converged: true,
        }
    }

    /// The largest ratio over grid points with `log lambda` in
    /// `[log_lo, log_hi]`; infinite entries dominate.
    pub fn regret_on_subgrid(&self, log_lo: f64, log_hi: f64) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.grid.len() {
            let l = self.grid.log_values[i];
            if l >= log_lo && l <= log_hi && self.ratio[i] > worst {
                worst = self.ratio[i];
            }
        }
        worst
    }
}

fn normalized_config(omega: f64, lambda: f64) -> Result<LimitExperimentConfig> {
    if !(omega > 1.0) {
        return Err(Error::config(format!(
            "omega must exceed 1 (the invariant statistic must carry information), got {omega}"
        )));
    }
    LimitExperimentConfig::normalized_scalar(omega, lambda)
}

/// The lambda-specific minimax risk in the normalized scalar experiment:
/// the minimum of the linear-rule closed form, always finite since `C = 1`
/// achieves `Omega`.
pub fn pointwise_optimal_risk(omega: f64, lambda: f64) -> Result<f64> {
    let config = normalized_config(omega, lambda)?;
    let (lo, hi) = scalar_c_bracket(&config)?;
    let (_, value) = golden_section(|c| scalar_linear_risk(&config, c), lo, hi, 1e-8);
    Ok(value)
}

/// Scalar gamma evaluation for the named shrinkage families and linear rules.
pub fn gamma_eval(rule: &RuleSpec, z: f64) -> f64 {
    rule.gamma_scalar(z)
}

/// Evaluates a rule's full-moment risk across the grid against the pointwise
/// optimum. Infinite entries are allowed and excluded from the regret;
/// per-lambda evaluations run in parallel.
pub fn rule_risk_curve(
    rule: &RuleSpec,
    omega: f64,
    grid: &LambdaGrid,
    settings: &IntegratorSettings,
) -> Result<AdaptiveReport> {
    normalized_config(omega, grid.values[0])?; // validates omega once
    let risk_rule: Vec<f64> = grid
        .values
        .par_iter()
        .map(|&lambda| -> Result<f64> {
            let config = normalized_config(omega, lambda)?;
            Ok(infinite_m_risk(&config, rule, &LossSpec::Squared, settings)?.value)
        })
        .collect::<Result<_>>()?;
    let risk_opt: Vec<f64> = grid
        .values
        .par_iter()
        .map(|&lambda| pointwise_optimal_risk(omega, lambda))
        .collect::<Result<_>>()?;
    Ok(AdaptiveReport::from_risks(grid.clone(), risk_rule, risk_opt))
}

/// The single-parameter shrinkage families of the adaptive study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShrinkageFamily {
    SoftThreshold,
    Erm,
}

impl ShrinkageFamily {
    pub fn rule(self, tau: f64) -> RuleSpec {
        match self {
            ShrinkageFamily::SoftThreshold => RuleSpec::SoftThreshold { tau },
            ShrinkageFamily::Erm => RuleSpec::Erm { tau },
        }
    }
}

/// Tunes the family's threshold to minimize adaptive regret by golden-section
/// over `log tau` on `[10^-3, 10]`, after a coarse bracketing scan. Returns
/// the minimizing threshold with its full report.
pub fn tune_threshold(
    family: ShrinkageFamily,
    omega: f64,
    grid: &LambdaGrid,
    settings: &IntegratorSettings,
) -> Result<(f64, AdaptiveReport)> {
    let kernel = CurveKernel::new(omega, grid, settings)?;
    let risk_opt: Vec<f64> = grid
        .values
        .iter()
        .map(|&lambda| pointwise_optimal_risk(omega, lambda))
        .collect::<Result<_>>()?;

    let regret_of = |log_tau: f64| -> f64 {
        let rule = family.rule(log_tau.exp());
        let risks = kernel.risks(&|z| rule.gamma_scalar(z));
        regret_for_tuning(&risks, &risk_opt)
    };

    let (log_lo, log_hi) = ((1e-3f64).ln(), (10.0f64).ln());
    // Coarse scan to bracket the minimum, then golden-section inside it.
    let n_scan = 13;
    let mut best = (f64::INFINITY, log_lo);
    for i in 0..n_scan {
        let lt = log_lo + (log_hi - log_lo) * i as f64 / (n_scan - 1) as f64;
        let r = regret_of(lt);
        if r < best.0 {
            best = (r, lt);
        }
    }
    let width = (log_hi - log_lo) / (n_scan - 1) as f64;
    let (log_tau, _) = golden_section(
        regret_of,
        (best.1 - width).max(log_lo),
        (best.1 + width).min(log_hi),
        1e-4,
    );
    let tau = log_tau.exp();
    let report = rule_risk_curve(&family.rule(tau), omega, grid, settings)?;
    Ok((tau, report))
}

fn regret_for_tuning(risks: &[f64], risk_opt: &[f64]) -> f64 {
    let mut worst = 1.0f64;
    for (r, o) in risks.iter().zip(risk_opt) {
        if !r.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(r / o);
    }
    worst
}

/// Optimizes a flattened linear spline `gamma` (piecewise linear between
/// evenly spaced knots on `±4 sd(Z)`, unit slope outside) to minimize the
/// worst risk ratio over the grid: bisection on the attainable level with
/// convex feasibility subproblems solved by Polyak subgradient descent.
pub fn optimize_spline(
    omega: f64,
    grid: &LambdaGrid,
    n_knots: usize,
    settings: &IntegratorSettings,
) -> Result<(RuleSpec, AdaptiveReport)> {
    if n_knots < 2 {
        return Err(Error::config("spline needs at least 2 knots"));
    }
    normalized_config(omega, grid.values[0])?;
    let half_width = 4.0 * (omega - 1.0).sqrt();
    let knots: Vec<f64> = (0..n_knots)
        .map(|j| -half_width + 2.0 * half_width * j as f64 / (n_knots - 1) as f64)
        .collect();

    let kernel = CurveKernel::new(omega, grid, settings)?;
    let risk_opt: Vec<f64> = grid
        .values
        .iter()
        .map(|&lambda| pointwise_optimal_risk(omega, lambda))
        .collect::<Result<_>>()?;
    let basis = kernel.spline_basis(&knots);

    // Warm start from the best coarse soft-threshold candidate.
    let values = {
        let mut best = (f64::INFINITY, 1.0f64);
        for i in 0..9 {
            let tau = (1e-3f64).ln() + ((10.0f64).ln() - (1e-3f64).ln()) * i as f64 / 8.0;
            let rule = RuleSpec::SoftThreshold { tau: tau.exp() };
            let risks = kernel.risks(&|z| rule.gamma_scalar(z));
            let r = regret_for_tuning(&risks, &risk_opt);
            if r < best.0 {
                best = (r, tau.exp());
            }
        }
        let st = RuleSpec::SoftThreshold { tau: best.1 };
        DVector::from_fn(n_knots, |j, _| st.gamma_scalar(knots[j]))
    };

    let ratios_and_grad = |v: &DVector<f64>| -> (f64, usize, Vec<DVector<f64>>) {
        let (risks, grads) = kernel.risks_and_grads(v, &basis);
        let mut worst = (f64::NEG_INFINITY, 0usize);
        for i in 0..risks.len() {
            let ratio = risks[i] / risk_opt[i];
            if ratio > worst.0 {
                worst = (ratio, i);
            }
        }
        (worst.0, worst.1, grads)
    };

    let (mut best_psi, _, _) = ratios_and_grad(&values);
    let mut best_values = values.clone();
    let mut improved = false;

    let mut t_lo = 1.0f64;
    let mut t_hi = best_psi;
    while t_hi - t_lo > 5e-4 {
        let target = 0.5 * (t_lo + t_hi);
        // Feasibility subproblem: drive max_i R_i / R*_i below the level by
        // Polyak-step subgradient descent from the current best iterate.
        let mut v = best_values.clone();
        let mut feasible = false;
        for _ in 0..150 {
            let (psi, active, grads) = ratios_and_grad(&v);
            if psi < best_psi {
                best_psi = psi;
                best_values = v.clone();
                improved = true;
            }
            if psi <= target {
                feasible = true;
                break;
            }
            let g = &grads[active] / risk_opt[active];
            let gnorm2 = g.norm_squared();
            if gnorm2 <= 1e-18 {
                break;
            }
            v -= ((psi - target) / gnorm2) * g;
        }
        if feasible {
            t_hi = target;
        } else {
            t_lo = target;
        }
    }

    let rule = RuleSpec::Spline { knots, values: best_values.iter().cloned().collect() };
    let mut report = rule_risk_curve(&rule, omega, grid, settings)?;
    report.solver_converged = improved || report.regret.is_finite();
    Ok((rule, report))
}

struct SplineBasis {
    weights: Vec<Vec<f64>>,
    tail: Vec<f64>,
}

/// Precomputed nested-quadrature nodes for the normalized scalar experiment,
/// shared across every lambda on a grid: outer nodes for `Y ~ N(0, Omega)`,
/// inner nodes for `X | Y`. Matches `infinite_m_risk` arithmetic exactly.
struct CurveKernel {
    lambdas: Vec<f64>,
    outer_w: Vec<f64>,
    /// Flattened per (outer j, inner l): x value and z = y - x.
    xs: Vec<f64>,
    zs: Vec<f64>,
    inner_logw: Vec<f64>,
    n_outer: usize,
    n_inner: usize,
}

impl CurveKernel {
    fn new(omega: f64, grid: &LambdaGrid, settings: &IntegratorSettings) -> Result<Self> {
        normalized_config(omega, grid.values[0])?;
        let rule = gauss_hermite(settings.nodes);
        let (t, w) = (&rule.0, &rule.1);
        let n = t.len();
        let slope = 1.0 / omega;
        let cond_sd = (1.0 - 1.0 / omega).sqrt();
        let sd_y = omega.sqrt();

        let mut xs = Vec::with_capacity(n * n);
        let mut zs = Vec::with_capacity(n * n);
        for j in 0..n {
            let y = sd_y * t[j];
            let mean_x = slope * y;
            for l in 0..n {
                let x = mean_x + cond_sd * t[l];
                xs.push(x);
                zs.push(y - x);
            }
        }
        Ok(Self {
            lambdas: grid.values.clone(),
            outer_w: w.clone(),
            xs,
            zs,
            inner_logw: w.iter().map(|v| v.ln()).collect(),
            n_outer: n,
            n_inner: n,
        })
    }

    /// Full-moment risks of `x + gamma(z)` at every lambda on the grid.
    fn risks(&self, gamma: &dyn Fn(f64) -> f64) -> Vec<f64> {
        let u2: Vec<f64> = self
            .xs
            .iter()
            .zip(&self.zs)
            .map(|(&x, &z)| {
                let u = x + gamma(z);
                u * u
            })
            .collect();
        self.lambdas
            .par_iter()
            .map(|&lambda| {
                let mut outer = 0.0;
                let mut buf = vec![0.0; self.n_inner];
                for j in 0..self.n_outer {
                    for l in 0..self.n_inner {
                        buf[l] = self.inner_logw[l] + u2[j * self.n_inner + l] / lambda;
                    }
                    outer += self.outer_w[j] * log_sum_exp(&buf);
                }
                lambda * outer
            })
            .collect()
    }

    /// Hat-function basis of a flattened spline over these nodes plus the
    /// fixed unit-slope tail offsets: `gamma(z_node)` equals
    /// `sum_j basis[j][node] * value_j + tail[node]`.
    fn spline_basis(&self, knots: &[f64]) -> SplineBasis {
        let nk = knots.len();
        let mut weights = vec![vec![0.0; self.zs.len()]; nk];
        let mut tail = vec![0.0; self.zs.len()];
        for (node, &z) in self.zs.iter().enumerate() {
            if z <= knots[0] {
                weights[0][node] = 1.0;
                tail[node] = z - knots[0];
            } else if z >= knots[nk - 1] {
                weights[nk - 1][node] = 1.0;
                tail[node] = z - knots[nk - 1];
            } else {
                let j = knots.partition_point(|&k| k < z);
                let t = (z - knots[j - 1]) / (knots[j] - knots[j - 1]);
                weights[j - 1][node] = 1.0 - t;
                weights[j][node] = t;
            }
        }
        SplineBasis { weights, tail }
    }

    /// Risks and their gradients in the spline knot values.
    fn risks_and_grads(
        &self,
        values: &DVector<f64>,
        basis: &SplineBasis,
    ) -> (Vec<f64>, Vec<DVector<f64>>) {
        let nk = basis.weights.len();
        let n_nodes = self.zs.len();
        let mut u = vec![0.0; n_nodes];
        for node in 0..n_nodes {
            let mut g = basis.tail[node];
            for j in 0..nk {
                g += basis.weights[j][node] * values[j];
            }
            u[node] = self.xs[node] + g;
        }
        let results: Vec<(f64, DVector<f64>)> = self
            .lambdas
            .par_iter()
            .map(|&lambda| {
                let mut value = 0.0;
                let mut grad = DVector::zeros(nk);
                let mut buf = vec![0.0; self.n_inner];
                for j in 0..self.n_outer {
                    let offset = j * self.n_inner;
                    for l in 0..self.n_inner {
                        buf[l] = self.inner_logw[l] + u[offset + l] * u[offset + l] / lambda;
                    }
                    let lse = log_sum_exp(&buf);
                    value += self.outer_w[j] * lse;
                    for l in 0..self.n_inner {
                        let p = (buf[l] - lse).exp();
                        let common = self.outer_w[j] * p * 2.0 * u[offset + l];
                        if common != 0.0 {
                            for knot in 0..nk {
                                let b = basis.weights[knot][offset + l];
                                if b != 0.0 {
                                    grad[knot] += common * b;
                                }
                            }
                        }
                    }
                }
                (lambda * value, grad)
            })
            .collect();
        let risks = results.iter().map(|r| r.0).collect();
        let grads = results.into_iter().map(|r| r.1).collect();
        (risks, grads)
    }
}
