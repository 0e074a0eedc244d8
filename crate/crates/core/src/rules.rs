//! Optimal equivariant rules under squared loss, the flat-prior tilted
//! posterior Bayes rule for general loss, and joint optimization over linear
//! rule classes.
//!
//! Under squared loss the best equivariant rule is `K x` when at most first
//! moments are constrained, and `K x + C* z` for a matrix `C*` once second
//! moments are constrained; the optimal value is then the same for every
//! order from two up to the full-moment limit, so the scalar closed form
//! below doubles as the pointwise optimum.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::experiment::{conditional_x_given_y, joint_law, LimitExperimentConfig};
use crate::moments::MomentVectorSpec;
use crate::quad::{log_sum_exp, GaussianNodes, IntegratorSettings};
use crate::risk::{
    finite_m_dual_risk, infinite_m_risk, LossSpec, MomentOrder,
    RiskReport, RuleSpec,
};
use crate::solve::{golden_section, newton_minimize, NewtonOptions, SmoothObjective};
use crate::{Error, Result};

/// Absolute cap on the linear coefficient search interval.
const C_CAP: f64 = 10.0;

/// Full-moment risk of the linear rule `K x + C z` under squared loss.
///
/// In the scalar case this is closed form: with `a = K + C Psi`,
/// `v = a^2 Var(X|Y)` and `mu = a slope + C`, the risk is infinite when
/// `2 v >= lambda` and otherwise
/// `-(lambda/2) log(1 - 2v/lambda) + lambda mu^2 Omega / (lambda - 2v)`.
/// Nonscalar configurations fall back to nested quadrature.
pub fn linear_rule_risk_closed_form(
    config: &LimitExperimentConfig,
    c: &DMatrix<f64>,
    settings: &IntegratorSettings,
) -> Result<f64> {
    let rule = RuleSpec::Linear { c: c.clone() };
    rule.validate(config)?;
    if !config.is_scalar() {
        return Ok(infinite_m_risk(config, &rule, &LossSpec::Squared, settings)?.value);
    }
    Ok(scalar_linear_risk(config, c[(0, 0)]))
}

pub(crate) fn scalar_linear_risk(config: &LimitExperimentConfig, c: f64) -> f64 {
    let lambda = config.lambda();
    let psi = config.psi()[(0, 0)];
    let k = config.k_mat()[(0, 0)];
    let omega = config.omega()[(0, 0)];
    let cond = conditional_x_given_y(config).expect("scalar config has a conditional law");
    let s2 = cond.cond_cov[(0, 0)].max(0.0);
    let slope = cond.slope[(0, 0)];

    let a = k + c * psi;
    let v = a * a * s2;
    if 2.0 * v >= lambda {
        return f64::INFINITY;
    }
    let mu = a * slope + c;
    -(lambda / 2.0) * (1.0 - 2.0 * v / lambda).ln() + lambda * mu * mu * omega / (lambda - 2.0 * v)
}

/// A sampled risk profile over scalar linear coefficients, with the
/// golden-section minimizer appended.
#[derive(Debug, Clone)]
pub struct LinearRiskProfile {
    pub c_values: Vec<f64>,
    pub risks: Vec<f64>,
    pub c_star: f64,
    pub r_star: f64,
}

/// The search interval for the scalar linear coefficient: the finiteness
/// domain of the conditional MGF, shrunk slightly off its boundary and capped
/// at `|C| <= 10`.
pub(crate) fn scalar_c_bracket(config: &LimitExperimentConfig) -> Result<(f64, f64)> {
    let lambda = config.lambda();
    let psi = config.psi()[(0, 0)];
    let k = config.k_mat()[(0, 0)];
    let cond = conditional_x_given_y(config)?;
    let s2 = cond.cond_cov[(0, 0)].max(0.0);
    if s2 == 0.0 || psi == 0.0 {
        return Ok((-C_CAP, C_CAP));
    }
    let a_max = 0.999 * (lambda / (2.0 * s2)).sqrt();
    let c1 = (-a_max - k) / psi;
    let c2 = (a_max - k) / psi;
    let (lo, hi) = if c1 < c2 { (c1, c2) } else { (c2, c1) };
    Ok((lo.max(-C_CAP), hi.min(C_CAP)))
}

/// Samples the scalar linear-rule risk on an even grid over the finiteness
/// bracket and locates the minimizer by golden-section.
pub fn linear_risk_profile(
    config: &LimitExperimentConfig,
    n_grid: usize,
) -> Result<LinearRiskProfile> {
    if !config.is_scalar() {
        return Err(Error::Unsupported { context: "risk profile is scalar-only".into() });
    }
    let (lo, hi) = scalar_c_bracket(config)?;
    let n = n_grid.max(3);
    let mut c_values = Vec::with_capacity(n);
    let mut risks = Vec::with_capacity(n);
    for i in 0..n {
        let c = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        c_values.push(c);
        risks.push(scalar_linear_risk(config, c));
    }
    let (c_star, r_star) = golden_section(|c| scalar_linear_risk(config, c), lo, hi, 1e-8);
    Ok(LinearRiskProfile { c_values, risks, c_star, r_star })
}

/// Solves for the optimal equivariant rule under squared loss.
///
/// Orders zero and one return the efficient rule `K x` with its dual risk;
/// order two and above (including the full-moment limit) return the linear
/// rule with `C*` minimizing the full-moment risk, whose value those orders
/// share.
pub fn optimal_rule(
    config: &LimitExperimentConfig,
    order: MomentOrder,
    loss: &LossSpec,
    settings: &IntegratorSettings,
) -> Result<(RuleSpec, RiskReport)> {
    if !loss.is_squared() {
        return Err(Error::Unsupported {
            context: "optimal_rule covers squared loss; use joint_optimize or \
                      bayes_rule_tilted for general convex loss"
                .into(),
        });
    }
    match order {
        MomentOrder::Finite(m) if m <= 1 => {
            let report =
                finite_m_dual_risk(config, &RuleSpec::Zero, loss, m, None, settings, false)?;
            Ok((RuleSpec::Zero, report))
        }
        _ => {
            if config.is_scalar() {
                let (lo, hi) = scalar_c_bracket(config)?;
                let (c_star, r_star) =
                    golden_section(|c| scalar_linear_risk(config, c), lo, hi, 1e-8);
                if !r_star.is_finite() {
                    // No linear coefficient achieves finite risk; report the
                    // moment-based rule when it exists, the efficient rule
                    // otherwise.
                    let fallback = RuleSpec::gmm(config).unwrap_or(RuleSpec::Zero);
                    return Ok((fallback, RiskReport::infinite()));
                }
                let rule = RuleSpec::linear_scalar(c_star);
                let mut report = RiskReport::infinite();
                report.value = r_star;
                report.status = crate::solve::SolveStatus::Converged;
                Ok((rule, report))
            } else {
                optimal_linear_matrix(config, settings)
            }
        }
    }
}

/// Nested-integration nodes for the full-moment risk of linear rules,
/// built once per solve so that every coefficient evaluation shares the same
/// points (common random numbers). Matches `infinite_m_risk` arithmetic.
struct NestedLinearRisk {
    outer_y: DMatrix<f64>,
    outer_logw: Vec<f64>,
    inner_x: DMatrix<f64>,
    inner_logw: Vec<f64>,
    slope: DMatrix<f64>,
    cond_cov: DMatrix<f64>,
    k_mat: DMatrix<f64>,
    psi: DMatrix<f64>,
    lambda: f64,
}

impl NestedLinearRisk {
    fn new(config: &LimitExperimentConfig, settings: &IntegratorSettings) -> Result<Self> {
        let cond = conditional_x_given_y(config)?;
        let quadrature = config.p() + config.k() <= IntegratorSettings::MAX_QUADRATURE_DIM;
        let (outer_settings, inner_settings) = if quadrature {
            (settings.clone(), settings.clone())
        } else {
            let n_inner = ((settings.mc_draws as f64).sqrt().ceil() as usize).clamp(256, 4096);
            let n_outer = (settings.mc_draws / n_inner).max(256);
            (
                IntegratorSettings { mc_draws: n_outer, ..settings.clone() },
                IntegratorSettings {
                    mc_draws: n_inner,
                    seed: settings.seed.wrapping_add(1),
                    ..settings.clone()
                },
            )
        };
        let outer = GaussianNodes::build(
            &DVector::zeros(config.k()),
            config.omega(),
            &outer_settings,
        )?;
        let inner = GaussianNodes::build(
            &DVector::zeros(config.p()),
            &cond.cond_cov,
            &inner_settings,
        )?;
        Ok(Self {
            outer_y: outer.points,
            outer_logw: outer.log_weights,
            inner_x: inner.points,
            inner_logw: inner.log_weights,
            slope: cond.slope,
            cond_cov: cond.cond_cov,
            k_mat: config.k_mat().clone(),
            psi: config.psi().clone(),
            lambda: config.lambda(),
        })
    }

    fn risk(&self, c: &DMatrix<f64>) -> f64 {
        // Divergence is decided by the conditional MGF of the squared loss.
        let a = &self.k_mat + c * &self.psi;
        let v = &a * &self.cond_cov * a.transpose();
        if 2.0 * v.symmetric_eigen().eigenvalues.amax() >= self.lambda {
            return f64::INFINITY;
        }
        // delta = K x + C z = (K + C Psi) x + C y.
        let cy_coef = c;
        let n_out = self.outer_y.ncols();
        let n_in = self.inner_x.ncols();
        let mut exponents = vec![0.0; n_in];
        let mut outer_sum = 0.0;
        let d = self.k_mat.nrows();
        let mut t_base = DVector::zeros(d);
        let mut t = DVector::zeros(d);
        for j in 0..n_out {
            let y = self.outer_y.column(j);
            let mean_x = &self.slope * y;
            // t = A (mean_x + x0) + C y.
            t_base.copy_from(&(&a * &mean_x + cy_coef * y));
            for l in 0..n_in {
                t.copy_from(&t_base);
                t.gemv(1.0, &a, &self.inner_x.column(l), 1.0);
                exponents[l] = self.inner_logw[l] + t.norm_squared() / self.lambda;
            }
            outer_sum += self.outer_logw[j].exp() * crate::quad::log_sum_exp(&exponents);
        }
        self.lambda * outer_sum
    }
}

/// Matrix-coefficient optimum by damped Newton with finite differences on
/// nested risk values over a fixed node set.
fn optimal_linear_matrix(
    config: &LimitExperimentConfig,
    settings: &IntegratorSettings,
) -> Result<(RuleSpec, RiskReport)> {
    let d = config.d();
    let k = config.k();
    let evaluator = NestedLinearRisk::new(config, settings)?;
    let eval = |theta: &DVector<f64>| -> f64 {
        let c = DMatrix::from_fn(d, k, |i, j| theta[i * k + j]);
        evaluator.risk(&c)
    };

    struct Fd<'a> {
        f: &'a dyn Fn(&DVector<f64>) -> f64,
        step: f64,
    }
    impl SmoothObjective for Fd<'_> {
        fn value(&self, x: &DVector<f64>) -> f64 {
            (self.f)(x)
        }
        fn value_grad_hess(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
            let n = x.len();
            let f0 = (self.f)(x);
            let h = self.step;
            let mut grad = DVector::zeros(n);
            let mut hess = DMatrix::zeros(n, n);
            let mut fp = vec![0.0; n];
            let mut fm = vec![0.0; n];
            for i in 0..n {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                fp[i] = (self.f)(&xp);
                fm[i] = (self.f)(&xm);
                grad[i] = (fp[i] - fm[i]) / (2.0 * h);
                hess[(i, i)] = (fp[i] - 2.0 * f0 + fm[i]) / (h * h);
            }
            for i in 0..n {
                for j in 0..i {
                    let mut xpp = x.clone();
                    xpp[i] += h;
                    xpp[j] += h;
                    let v = ((self.f)(&xpp) - fp[i] - fp[j] + f0) / (h * h);
                    hess[(i, j)] = v;
                    hess[(j, i)] = v;
                }
            }
            (f0, grad, hess)
        }
    }

    let objective = Fd { f: &eval, step: 1e-4 };
    let start = DVector::zeros(d * k);
    let opts = NewtonOptions { gradient_tol: 1e-6, max_iterations: 60, ..Default::default() };
    let (theta, diag) = newton_minimize(&objective, &start, &opts);

    // Keep whichever of {optimized C, zero, moment rule} evaluates best.
    let mut best_theta = theta;
    let mut best_value = diag.value;
    for candidate in [Some(DVector::zeros(d * k)), gmm_theta(config, d, k)].into_iter().flatten() {
        let v = eval(&candidate);
        if v < best_value {
            best_value = v;
            best_theta = candidate;
        }
    }
    if !best_value.is_finite() {
        let fallback = RuleSpec::gmm(config).unwrap_or(RuleSpec::Zero);
        return Ok((fallback, RiskReport::infinite()));
    }
    let c = DMatrix::from_fn(d, k, |i, j| best_theta[i * k + j]);
    Ok((
        RuleSpec::Linear { c },
        RiskReport {
            value: best_value,
            beta_star: None,
            iterations: diag.iterations,
            gradient_norm: diag.gradient_norm,
            status: diag.status,
        },
    ))
}

fn gmm_theta(config: &LimitExperimentConfig, d: usize, k: usize) -> Option<DVector<f64>> {
    match RuleSpec::gmm(config) {
        Ok(RuleSpec::Linear { c }) => {
            Some(DVector::from_fn(d * k, |i, _| c[(i / k, i % k)]))
        }
        _ => None,
    }
}

/// The flat-prior tilted-posterior Bayes action at an observed `(x, y)`:
/// `argmin_a ∫ exp(loss(a - K h)/lambda) pi_beta(h | x, y) dh` with
/// `pi_beta(h) ∝ q_0(x - h, y + Psi h) exp(beta' W_{M,h})`.
///
/// Defined for scalar parameter and action (`p = d = 1`). The `h` integral
/// runs over eight untilted posterior standard deviations on a grid refined
/// until the action is stable; ties in flat regions of the loss resolve to
/// the midpoint of the minimizing interval.
pub fn bayes_rule_tilted(
    config: &LimitExperimentConfig,
    beta: &DVector<f64>,
    loss: &LossSpec,
    m: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    if config.p() != 1 || config.d() != 1 {
        return Err(Error::Unsupported {
            context: "bayes_rule_tilted requires scalar parameter and action".into(),
        });
    }
    if x.len() != 1 || y.len() != config.k() {
        return Err(Error::dim("observation shape mismatch"));
    }
    let spec = MomentVectorSpec::new(config.omega(), m)?;
    if beta.len() != spec.len() {
        return Err(Error::dim(format!(
            "beta must have length {}, got {}",
            spec.len(),
            beta.len()
        )));
    }

    let k_dim = config.k();
    let law = joint_law(config, &DVector::zeros(1))?;
    let prec = law
        .cov
        .clone()
        .cholesky()
        .ok_or(Error::NotSpd { name: "joint covariance" })?
        .inverse();

    // The location family traces v(h) = v0 + h u inside the joint density.
    let mut v0 = DVector::zeros(1 + k_dim);
    v0[0] = x[0];
    for r in 0..k_dim {
        v0[r + 1] = y[r];
    }
    let mut u = DVector::zeros(1 + k_dim);
    u[0] = -1.0;
    for r in 0..k_dim {
        u[r + 1] = config.psi()[(r, 0)];
    }
    let rho = (u.transpose() * &prec * &u)[(0, 0)];
    if rho <= 0.0 {
        return Err(Error::NotSpd { name: "posterior precision" });
    }
    let center = -(u.transpose() * &prec * &v0)[(0, 0)] / rho;
    let sd = rho.powf(-0.5);

    let k_scalar = config.k_mat()[(0, 0)];
    let lambda = config.lambda();
    let psi_col: DVector<f64> = config.psi().column(0).into();

    // Analytic integrability for squared loss: the loss-weighted integrand
    // has h-precision rho - 2 K^2 / lambda before tilting, and the tilt adds
    // its own quadratic when second moments are constrained.
    let mut rho_eff = rho;
    if loss.is_squared() {
        rho_eff -= 2.0 * k_scalar * k_scalar / lambda;
    }
    let mut tilt_quad = 0.0;
    for (j, idx) in spec.indices.iter().enumerate() {
        if idx.order() == 2 {
            // h^2 coefficient of prod_s (y + Psi h)_s^{m_s}.
            let mut coef = 1.0;
            for (s, &e) in idx.exponents.iter().enumerate() {
                coef *= psi_col[s].powi(e as i32);
            }
            tilt_quad += beta[j] * coef;
        }
    }
    if rho_eff - 2.0 * tilt_quad <= 0.0 {
        return Err(Error::NonIntegrableTilt { beta: beta.iter().cloned().collect() });
    }
    let window_sd = sd.max((rho_eff - 2.0 * tilt_quad).powf(-0.5));
    let (h_lo, h_hi) = (center - 8.0 * window_sd, center + 8.0 * window_sd);

    let log_post = |h: f64| -> f64 {
        let v = &v0 + h * &u;
        let quad = (v.transpose() * &prec * &v)[(0, 0)];
        let yh = y + &psi_col * h;
        let w = spec.w_vector(&yh).expect("dimensions checked");
        -0.5 * quad + beta.dot(&w)
    };

    let mut action = f64::NAN;
    let mut n_grid = 1001usize;
    loop {
        let step = (h_hi - h_lo) / (n_grid - 1) as f64;
        let hs: Vec<f64> = (0..n_grid).map(|i| h_lo + step * i as f64).collect();
        let logs: Vec<f64> = hs.iter().map(|&h| log_post(h)).collect();
        let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // Divergence shows up as the integrand rising toward a window edge
        // while still carrying non-negligible mass. This is checked both for
        // the bare posterior and with the loss factor at a reference action.
        let ref_a = k_scalar * center;
        let full = |i: usize| {
            logs[i] + loss.eval(&DVector::from_element(1, ref_a - k_scalar * hs[i])) / lambda
        };
        let fulls: Vec<f64> = (0..n_grid).map(full).collect();
        let full_peak = fulls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let n = n_grid;
        let rising = |v: &[f64], peak: f64| {
            (v[0] >= v[1] && v[0] > peak - 20.0) || (v[n - 1] >= v[n - 2] && v[n - 1] > peak - 20.0)
        };
        if rising(&logs, peak) || rising(&fulls, full_peak) {
            return Err(Error::NonIntegrableTilt { beta: beta.iter().cloned().collect() });
        }
        let weights: Vec<f64> = logs.iter().map(|l| (l - peak).exp()).collect();

        let objective = |a: f64| -> f64 {
            let mut acc = vec![0.0; n_grid];
            for i in 0..n_grid {
                let t = DVector::from_element(1, a - k_scalar * hs[i]);
                acc[i] = weights[i].ln() + loss.eval(&t) / lambda;
            }
            log_sum_exp(&acc)
        };
        let (a_lo, a_hi) = if k_scalar >= 0.0 {
            (k_scalar * h_lo, k_scalar * h_hi)
        } else {
            (k_scalar * h_hi, k_scalar * h_lo)
        };
        let (a_star, g_star) = golden_section(objective, a_lo, a_hi, 1e-9 * (1.0 + sd));
        // Flat-region ties resolve to the midpoint of the minimizing
        // interval.
        let probe = 1e-7 * (1.0 + a_star.abs());
        let tol = 1e-12 * (1.0 + g_star.abs());
        let mut left = a_star;
        while left - probe > a_lo && objective(left - probe) <= g_star + tol {
            left -= probe;
        }
        let mut right = a_star;
        while right + probe < a_hi && objective(right + probe) <= g_star + tol {
            right += probe;
        }
        let refined = 0.5 * (left + right);

        if action.is_finite() && (refined - action).abs() <= 1e-8 * (1.0 + refined.abs()) {
            return Ok(refined);
        }
        action = refined;
        if n_grid >= 16001 {
            return Ok(refined);
        }
        n_grid = n_grid * 2 - 1;
    }
}

/// An invariant feature of the maximal invariant, shared across threads.
pub type FeatureMap = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// A linear rule class `delta(x, y) = K x + Gamma phi(z)` over invariant
/// features, together with precomputed integration nodes. The tilted
/// objective is jointly convex in `(Gamma, beta)`.
pub struct JointProblem {
    d: usize,
    n_features: usize,
    n_constraints: usize,
    lambda: f64,
    /// Per node: log weight.
    log_weights: Vec<f64>,
    /// `d x n`: the fixed `K x` offsets.
    kx: DMatrix<f64>,
    /// `J x n`: feature columns.
    features: DMatrix<f64>,
    /// `b x n`: moment columns.
    w: DMatrix<f64>,
    loss: LossSpec,
}

impl JointProblem {
    pub fn new(
        config: &LimitExperimentConfig,
        m: usize,
        loss: &LossSpec,
        basis: &[FeatureMap],
        settings: &IntegratorSettings,
    ) -> Result<Self> {
        let spec = MomentVectorSpec::new(config.omega(), m)?;
        let law = joint_law(config, &DVector::zeros(config.p()))?;
        let nodes = GaussianNodes::build(&law.mean, &law.cov, settings)?;
        let (p, k, d) = (config.p(), config.k(), config.d());
        let n = nodes.len();
        let n_features = basis.len();
        let b = spec.len();

        let mut kx = DMatrix::zeros(d, n);
        let mut features = DMatrix::zeros(n_features, n);
        let mut w = DMatrix::zeros(b, n);
        let mut wcol = vec![0.0; b];
        let mut x = DVector::zeros(p);
        let mut y = DVector::zeros(k);
        for i in 0..n {
            let col = nodes.points.column(i);
            for r in 0..p {
                x[r] = col[r];
            }
            for r in 0..k {
                y[r] = col[p + r];
            }
            let z = &y + config.psi() * &x;
            kx.set_column(i, &(config.k_mat() * &x));
            for (j, f) in basis.iter().enumerate() {
                features[(j, i)] = f(&z);
            }
            if b > 0 {
                spec.w_vector_into(&y, &mut wcol);
                for j in 0..b {
                    w[(j, i)] = wcol[j];
                }
            }
        }
        Ok(Self {
            d,
            n_features,
            n_constraints: b,
            lambda: config.lambda(),
            log_weights: nodes.log_weights,
            kx,
            features,
            w,
            loss: loss.clone(),
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_constraints(&self) -> usize {
        self.n_constraints
    }

    /// `log E[exp(loss(K x + Gamma phi)/lambda + beta' W)]`.
    pub fn objective_log(&self, gamma: &DMatrix<f64>, beta: &DVector<f64>) -> f64 {
        let theta = self.pack(gamma, beta);
        self.log_value(&theta)
    }

    fn pack(&self, gamma: &DMatrix<f64>, beta: &DVector<f64>) -> DVector<f64> {
        assert_eq!((gamma.nrows(), gamma.ncols()), (self.d, self.n_features));
        assert_eq!(beta.len(), self.n_constraints);
        let mut theta = DVector::zeros(self.dim());
        for r in 0..self.d {
            for c in 0..self.n_features {
                theta[r * self.n_features + c] = gamma[(r, c)];
            }
        }
        for j in 0..self.n_constraints {
            theta[self.d * self.n_features + j] = beta[j];
        }
        theta
    }

    fn unpack(&self, theta: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let gamma =
            DMatrix::from_fn(self.d, self.n_features, |r, c| theta[r * self.n_features + c]);
        let beta =
            DVector::from_fn(self.n_constraints, |j, _| theta[self.d * self.n_features + j]);
        (gamma, beta)
    }

    fn dim(&self) -> usize {
        self.d * self.n_features + self.n_constraints
    }

    fn scores(&self, theta: &DVector<f64>) -> Vec<f64> {
        let (gamma, beta) = self.unpack(theta);
        let n = self.log_weights.len();
        let mut out = vec![0.0; n];
        let mut t = DVector::zeros(self.d);
        for i in 0..n {
            t.copy_from(&self.kx.column(i));
            if self.n_features > 0 {
                t += &gamma * self.features.column(i);
            }
            let mut s = self.log_weights[i] + self.loss.eval(&t) / self.lambda;
            for j in 0..self.n_constraints {
                s += beta[j] * self.w[(j, i)];
            }
            out[i] = s;
        }
        out
    }

    fn log_value(&self, theta: &DVector<f64>) -> f64 {
        log_sum_exp(&self.scores(theta))
    }

    /// Minimizes the jointly convex tilted objective over `(Gamma, beta)` by
    /// damped Newton, returning the optimizers and
    /// `lambda * log E[...]` at the optimum.
    pub fn optimize(&self) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
        struct Objective<'a> {
            problem: &'a JointProblem,
        }
        impl SmoothObjective for Objective<'_> {
            fn value(&self, theta: &DVector<f64>) -> f64 {
                self.problem.log_value(theta)
            }
            fn value_grad_hess(
                &self,
                theta: &DVector<f64>,
            ) -> (f64, DVector<f64>, DMatrix<f64>) {
                match &self.problem.loss {
                    LossSpec::Squared => self.problem.squared_grad_hess(theta),
                    LossSpec::Custom(_) => fd_grad_hess(
                        &|t: &DVector<f64>| self.problem.log_value(t),
                        theta,
                        1e-5,
                    ),
                }
            }
        }
        let objective = Objective { problem: self };
        let opts = NewtonOptions { gradient_tol: 1e-7, ..Default::default() };
        let (theta, diag) = newton_minimize(&objective, &DVector::zeros(self.dim()), &opts);
        if !diag.value.is_finite() {
            return Err(Error::Infeasible {
                context: "joint objective is infinite along every probed direction".into(),
            });
        }
        let (gamma, beta) = self.unpack(&theta);
        Ok((gamma, beta, self.lambda * diag.value))
    }

    /// Analytic softmax gradient and Hessian for squared loss. The per-node
    /// exponent is `|K x + Gamma phi|^2 / lambda + beta' W`; its gradient in
    /// `Gamma` is `(2/lambda) t phi'` and the curvature splits into the
    /// softmax covariance plus the within-node `(2/lambda) phi phi' (x) I_d`
    /// block.
    fn squared_grad_hess(&self, theta: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let (gamma, _) = self.unpack(theta);
        let n = self.log_weights.len();
        let dim = self.dim();
        let nf = self.n_features;
        let b = self.n_constraints;
        let scores = self.scores(theta);
        let lse = log_sum_exp(&scores);

        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        let mut node_grad = DVector::zeros(dim);
        let mut t = DVector::zeros(self.d);
        for i in 0..n {
            let p = (scores[i] - lse).exp();
            if p == 0.0 {
                continue;
            }
            t.copy_from(&self.kx.column(i));
            if nf > 0 {
                t += &gamma * self.features.column(i);
            }
            node_grad.fill(0.0);
            for r in 0..self.d {
                for c in 0..nf {
                    node_grad[r * nf + c] =
                        2.0 / self.lambda * t[r] * self.features[(c, i)];
                }
            }
            for j in 0..b {
                node_grad[self.d * nf + j] = self.w[(j, i)];
            }
            grad.axpy(p, &node_grad, 1.0);
            // Softmax second-moment part.
            for r in 0..dim {
                let pr = p * node_grad[r];
                for c in 0..=r {
                    hess[(r, c)] += pr * node_grad[c];
                }
            }
            // Within-node curvature of the squared loss in Gamma; fills the
            // lower triangle like the softmax part, symmetrized below.
            for r in 0..self.d {
                for c1 in 0..nf {
                    for c2 in 0..=c1 {
                        hess[(r * nf + c1, r * nf + c2)] += 2.0 / self.lambda
                            * self.features[(c1, i)]
                            * self.features[(c2, i)]
                            * p;
                    }
                }
            }
        }
        for r in 0..dim {
            for c in 0..r {
                hess[(c, r)] = hess[(r, c)];
            }
        }
        hess -= &grad * grad.transpose();
        (lse, grad, hess)
    }
}

fn fd_grad_hess(
    f: &dyn Fn(&DVector<f64>) -> f64,
    x: &DVector<f64>,
    h: f64,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let f0 = f(x);
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for i in 0..n {
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        fp[i] = f(&xp);
        fm[i] = f(&xm);
        grad[i] = (fp[i] - fm[i]) / (2.0 * h);
        hess[(i, i)] = (fp[i] - 2.0 * f0 + fm[i]) / (h * h);
    }
    for i in 0..n {
        for j in 0..i {
            let mut xpp = x.clone();
            xpp[i] += h;
            xpp[j] += h;
            let v = (f(&xpp) - fp[i] - fp[j] + f0) / (h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    (f0, grad, hess)
}

/// Minimizes `E[exp(loss(K x + Gamma phi(z))/lambda + beta' W)]` jointly over
/// `(Gamma, beta)` for a basis of invariant features, returning
/// `(Gamma*, beta*, lambda * log E at the optimum)`.
pub fn joint_optimize(
    config: &LimitExperimentConfig,
    m: usize,
    loss: &LossSpec,
    basis: &[FeatureMap],
    settings: &IntegratorSettings,
) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    JointProblem::new(config, m, loss, basis, settings)?.optimize()
}
