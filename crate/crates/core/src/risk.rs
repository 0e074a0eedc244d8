//! Constrained-multiplier risk of decision rules.
//!
//! The risk of a rule `delta` is the KL-penalized worst case of its expected
//! loss over distributions that preserve the moments of the invariant
//! statistic up to order `M`. By convex duality this equals
//!
//! ```text
//! lambda * log inf_beta E[ exp(loss(delta - K h)/lambda) exp(beta' W) ]
//! ```
//!
//! with `W` the centered moment vector of `Y + Psi h`. The `M = infinity`
//! case instead nests expectations: the adversary can distort the
//! conditional law of `X` given `Y` but not the marginal of `Y`, giving
//! `lambda * E_Y[ log E_{X|Y}[ exp(loss/lambda) | Y ] ]`.
//!
//! Infinite risk is a first-class value. For squared loss divergence is
//! detected analytically from the Gaussian moment generating function; for
//! other losses a numeric overflow guard flags exponents the quadrature
//! cannot be trusted on.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::experiment::{conditional_x_given_y, joint_law, LimitExperimentConfig};
use crate::moments::MomentVectorSpec;
use crate::quad::{log_sum_exp, GaussianNodes, IntegratorSettings};
use crate::solve::{
    newton_minimize, NewtonOptions, SmoothObjective, SolveDiagnostics, SolveStatus,
};
use crate::{Error, Result};

/// Exponent above which a single integrand evaluation is considered evidence
/// of a divergent expectation when no analytic finiteness test applies.
const OVERFLOW_GUARD: f64 = 700.0;

/// Moment-constraint order: a finite number of constrained moments or the
/// full-moment limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentOrder {
    Finite(usize),
    Infinite,
}

impl FromStr for MomentOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "infinity" | "Inf" => Ok(MomentOrder::Infinite),
            other => other
                .parse::<usize>()
                .map(MomentOrder::Finite)
                .map_err(|_| Error::config(format!("invalid moment order {other:?}"))),
        }
    }
}

impl fmt::Display for MomentOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MomentOrder::Finite(m) => write!(f, "{m}"),
            MomentOrder::Infinite => write!(f, "inf"),
        }
    }
}

/// An equivariant decision rule `delta(x, y) = K x + gamma(z)` for
/// `z = y + Psi x`, with `gamma` drawn from a named family.
///
/// The scalar shrinkage families (soft-threshold, ERM, spline) are defined in
/// the normalized scalar experiment `I0 = 1`, `Psi = -1`, `K = 1` and are
/// rejected elsewhere. Spline rules are piecewise linear between their knots
/// with slope exactly one outside the knot range, so they approach a shifted
/// moment-based rule in the tails.
#[derive(Debug, Clone, PartialEq)]
pub enum RuleSpec {
    /// `gamma = 0`: the efficient rule `K x`.
    Zero,
    /// `gamma(z) = C z` for a `d x k` matrix `C`.
    Linear { c: DMatrix<f64> },
    /// `gamma(z) = sgn(z) max(|z| - tau, 0)`.
    SoftThreshold { tau: f64 },
    /// `gamma(z) = z^3 / (z^2 + tau)`.
    Erm { tau: f64 },
    /// Piecewise-linear interpolation through `(knots, values)`, unit slope
    /// outside `[first knot, last knot]`.
    Spline { knots: Vec<f64>, values: Vec<f64> },
}

impl RuleSpec {
    pub fn linear_scalar(c: f64) -> Self {
        RuleSpec::Linear { c: DMatrix::from_element(1, 1, c) }
    }

    /// The moment-based (GMM) rule written in equivariant form:
    /// `C = -K (Psi' Omega^{-1} Psi)^{-1} Psi' Omega^{-1}`, which cancels the
    /// `K x` term and leaves a pure function of `y`.
    pub fn gmm(config: &LimitExperimentConfig) -> Result<Self> {
        let omega_inv = config
            .omega()
            .clone()
            .cholesky()
            .ok_or(Error::NotSpd { name: "Omega" })?
            .inverse();
        let gram = config.psi().transpose() * &omega_inv * config.psi();
        let gram_inv = gram
            .cholesky()
            .ok_or(Error::config("Psi' Omega^{-1} Psi is singular: GMM rule undefined"))?
            .inverse();
        let c = -(config.k_mat() * gram_inv * config.psi().transpose() * omega_inv);
        Ok(RuleSpec::Linear { c })
    }

    pub fn validate(&self, config: &LimitExperimentConfig) -> Result<()> {
        match self {
            RuleSpec::Zero => Ok(()),
            RuleSpec::Linear { c } => {
                if c.nrows() != config.d() || c.ncols() != config.k() {
                    Err(Error::dim(format!(
                        "linear rule needs a {}x{} matrix, got {}x{}",
                        config.d(),
                        config.k(),
                        c.nrows(),
                        c.ncols()
                    )))
                } else {
                    Ok(())
                }
            }
            RuleSpec::SoftThreshold { tau } | RuleSpec::Erm { tau } => {
                require_normalized_scalar(config)?;
                if *tau > 0.0 {
                    Ok(())
                } else {
                    Err(Error::config(format!("tau must be positive, got {tau}")))
                }
            }
            RuleSpec::Spline { knots, values } => {
                require_normalized_scalar(config)?;
                if knots.len() < 2 {
                    return Err(Error::config("spline needs at least 2 knots"));
                }
                if knots.len() != values.len() {
                    return Err(Error::dim("spline knots and values must have equal length"));
                }
                if knots.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config("spline knots must be strictly increasing"));
                }
                Ok(())
            }
        }
    }

    /// Scalar `gamma(z)` for the shrinkage families and scalar linear rules.
    pub fn gamma_scalar(&self, z: f64) -> f64 {
        match self {
            RuleSpec::Zero => 0.0,
            RuleSpec::Linear { c } => {
                debug_assert_eq!((c.nrows(), c.ncols()), (1, 1));
                c[(0, 0)] * z
            }
            RuleSpec::SoftThreshold { tau } => (z.abs() - tau).max(0.0) * z.signum(),
            RuleSpec::Erm { tau } => z.powi(3) / (z * z + tau),
            RuleSpec::Spline { knots, values } => {
                let n = knots.len();
                if z <= knots[0] {
                    return values[0] + (z - knots[0]);
                }
                if z >= knots[n - 1] {
                    return values[n - 1] + (z - knots[n - 1]);
                }
                let j = match knots.binary_search_by(|k| k.partial_cmp(&z).unwrap()) {
                    Ok(j) => return values[j],
                    Err(j) => j,
                };
                let t = (z - knots[j - 1]) / (knots[j] - knots[j - 1]);
                values[j - 1] + t * (values[j] - values[j - 1])
            }
        }
    }

    /// `gamma(z)` for a general invariant-statistic vector.
    pub fn gamma(&self, z: &DVector<f64>, d: usize) -> DVector<f64> {
        match self {
            RuleSpec::Zero => DVector::zeros(d),
            RuleSpec::Linear { c } => c * z,
            _ => DVector::from_element(1, self.gamma_scalar(z[0])),
        }
    }

    /// Coefficient on `x` holding `y` fixed, defined for zero and linear
    /// rules: `A = K + C Psi`.
    fn x_coefficient(&self, config: &LimitExperimentConfig) -> Option<DMatrix<f64>> {
        match self {
            RuleSpec::Zero => Some(config.k_mat().clone()),
            RuleSpec::Linear { c } => Some(config.k_mat() + c * config.psi()),
            _ => None,
        }
    }

    /// Whether `gamma(z) - z` is bounded, so the rule tracks the moment
    /// statistic in the tails. True for all scalar shrinkage families.
    fn has_unit_slope_tails(&self) -> bool {
        matches!(
            self,
            RuleSpec::SoftThreshold { .. } | RuleSpec::Erm { .. } | RuleSpec::Spline { .. }
        )
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            RuleSpec::Zero => "zero",
            RuleSpec::Linear { .. } => "linear",
            RuleSpec::SoftThreshold { .. } => "soft_threshold",
            RuleSpec::Erm { .. } => "erm",
            RuleSpec::Spline { .. } => "spline",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            RuleSpec::Zero => serde_json::json!({"family": "zero"}),
            RuleSpec::Linear { c } => serde_json::json!({
                "family": "linear",
                "c": (0..c.nrows())
                    .map(|i| (0..c.ncols()).map(|j| c[(i, j)]).collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
            }),
            RuleSpec::SoftThreshold { tau } => {
                serde_json::json!({"family": "soft_threshold", "tau": tau})
            }
            RuleSpec::Erm { tau } => serde_json::json!({"family": "erm", "tau": tau}),
            RuleSpec::Spline { knots, values } => {
                serde_json::json!({"family": "spline", "knots": knots, "values": values})
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(serde::Deserialize)]
        #[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
        enum Raw {
            Zero,
            Linear { c: Vec<Vec<f64>> },
            SoftThreshold { tau: f64 },
            Erm { tau: f64 },
            Spline { knots: Vec<f64>, values: Vec<f64> },
        }
        let raw: Raw = serde_json::from_str(text)?;
        Ok(match raw {
            Raw::Zero => RuleSpec::Zero,
            Raw::Linear { c } => {
                if c.is_empty() || c[0].is_empty() || c.iter().any(|r| r.len() != c[0].len()) {
                    return Err(Error::dim("linear rule matrix must be rectangular"));
                }
                RuleSpec::Linear {
                    c: DMatrix::from_fn(c.len(), c[0].len(), |i, j| c[i][j]),
                }
            }
            Raw::SoftThreshold { tau } => RuleSpec::SoftThreshold { tau },
            Raw::Erm { tau } => RuleSpec::Erm { tau },
            Raw::Spline { knots, values } => RuleSpec::Spline { knots, values },
        })
    }
}

fn require_normalized_scalar(config: &LimitExperimentConfig) -> Result<()> {
    let ok = config.is_scalar()
        && (config.i0()[(0, 0)] - 1.0).abs() < 1e-12
        && (config.psi()[(0, 0)] + 1.0).abs() < 1e-12
        && (config.k_mat()[(0, 0)] - 1.0).abs() < 1e-12;
    if ok {
        Ok(())
    } else {
        Err(Error::Unsupported {
            context: "shrinkage families are defined in the normalized scalar experiment \
                      (I0 = 1, Psi = -1, K = 1)"
                .into(),
        })
    }
}

/// A shared convex loss evaluator.
pub type LossEval = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// Loss on the scaled estimation error: squared error by default, or a
/// user-supplied convex nonnegative evaluator. The tilted loss used
/// throughout is `exp(loss(u) / lambda) >= 1`.
#[derive(Clone)]
pub enum LossSpec {
    Squared,
    Custom(LossEval),
}

impl LossSpec {
    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        match self {
            LossSpec::Squared => u.norm_squared(),
            LossSpec::Custom(f) => f(u),
        }
    }

    pub fn is_squared(&self) -> bool {
        matches!(self, LossSpec::Squared)
    }

    /// Spot-checks the stated invariants on random segments: nonnegativity,
    /// `loss(0)` minimal among the probes, and midpoint convexity.
    pub fn spot_check(&self, dim: usize, seed: u64) -> Result<()> {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let zero = DVector::zeros(dim);
        let at_zero = self.eval(&zero);
        if !(at_zero >= 0.0) {
            return Err(Error::config("loss must be nonnegative"));
        }
        for _ in 0..64 {
            let a = DVector::from_fn(dim, |_, _| 4.0 * crate::quad::standard_normal(&mut rng));
            let b = DVector::from_fn(dim, |_, _| 4.0 * crate::quad::standard_normal(&mut rng));
            let (fa, fb) = (self.eval(&a), self.eval(&b));
            if fa < 0.0 || fb < 0.0 {
                return Err(Error::config("loss must be nonnegative"));
            }
            if fa < at_zero - 1e-12 || fb < at_zero - 1e-12 {
                return Err(Error::config("loss must be minimized at zero"));
            }
            let mid = self.eval(&(0.5 * (&a + &b)));
            if mid > 0.5 * (fa + fb) + 1e-9 * (1.0 + fa.abs() + fb.abs()) {
                return Err(Error::config("loss failed a midpoint convexity check"));
            }
        }
        Ok(())
    }
}

impl fmt::Debug for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossSpec::Squared => write!(f, "Squared"),
            LossSpec::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Outcome of a risk evaluation: an extended-real value, the minimizing
/// multiplier when one was solved for, and solver diagnostics.
#[derive(Debug, Clone)]
pub struct RiskReport {
    pub value: f64,
    pub beta_star: Option<DVector<f64>>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub status: SolveStatus,
}

impl RiskReport {
    pub fn infinite() -> Self {
        Self {
            value: f64::INFINITY,
            beta_star: None,
            iterations: 0,
            gradient_norm: 0.0,
            status: SolveStatus::DivergedToInfinity,
        }
    }

    fn exact(value: f64) -> Self {
        Self {
            value,
            beta_star: None,
            iterations: 0,
            gradient_norm: 0.0,
            status: SolveStatus::Converged,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// `E[exp(a U^2)]` for `U ~ N(mean, var)` as an extended real:
/// infinite when `2 a var >= 1`, otherwise
/// `(1 - 2 a var)^{-1/2} exp(a mean^2 / (1 - 2 a var))`.
pub fn mgf_squared_gaussian(mean: f64, var: f64, a: f64) -> f64 {
    let var = var.max(0.0);
    let denom = 1.0 - 2.0 * a * var;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    denom.powf(-0.5) * (a * mean * mean / denom).exp()
}

/// Analytic finiteness of the risk for squared loss, where decidable.
/// `Some(true)` means the risk is `+inf`, `Some(false)` that it is finite,
/// `None` that no analytic test applies.
fn squared_loss_divergence(
    config: &LimitExperimentConfig,
    rule: &RuleSpec,
    order: MomentOrder,
) -> Result<Option<bool>> {
    if let Some(a) = rule.x_coefficient(config) {
        let v = match order {
            // Low orders only tilt by (at most linear) functions of Y, which
            // cannot fix a divergent Gaussian quadratic: finiteness is the
            // marginal MGF condition on Var(delta).
            MomentOrder::Finite(m) if m <= 1 => {
                let c = match rule {
                    RuleSpec::Zero => DMatrix::zeros(config.d(), config.k()),
                    RuleSpec::Linear { c } => c.clone(),
                    _ => unreachable!(),
                };
                let law = joint_law(config, &DVector::zeros(config.p()))?;
                let mut b = DMatrix::zeros(config.d(), config.p() + config.k());
                b.view_mut((0, 0), (config.d(), config.p())).copy_from(&a);
                b.view_mut((0, config.p()), (config.d(), config.k())).copy_from(&c);
                &b * &law.cov * b.transpose()
            }
            // With second moments constrained the value matches the
            // full-moment case for linear rules, whose condition involves
            // the conditional variance of X given Y.
            _ => {
                let cond = conditional_x_given_y(config)?;
                &a * &cond.cond_cov * a.transpose()
            }
        };
        let lam_max = v.symmetric_eigen().eigenvalues.amax();
        return Ok(Some(2.0 * lam_max >= config.lambda()));
    }
    if rule.has_unit_slope_tails() {
        return Ok(match order {
            // delta tracks y in the tails, so low orders need the marginal
            // MGF condition on Var(Y); from order two on a negative tilt on
            // the squared component restores integrability.
            MomentOrder::Finite(m) if m <= 1 => {
                Some(2.0 * config.omega()[(0, 0)] >= config.lambda())
            }
            _ => Some(false),
        });
    }
    Ok(None)
}

/// Per-node data shared by every `beta` evaluation in one solve: the log
/// weight plus loss exponent, and the moment vector column.
struct TiltedNodes {
    /// `log w_i + loss(delta_i - K h) / lambda`.
    base: Vec<f64>,
    /// `b x n` matrix of moment vectors.
    w: DMatrix<f64>,
}

fn build_tilted_nodes(
    config: &LimitExperimentConfig,
    rule: &RuleSpec,
    loss: &LossSpec,
    spec: &MomentVectorSpec,
    h: &DVector<f64>,
    settings: &IntegratorSettings,
) -> Result<TiltedNodes> {
    let law = joint_law(config, h)?;
    let nodes = GaussianNodes::build(&law.mean, &law.cov, settings)?;
    let p = config.p();
    let k = config.k();
    let d = config.d();
    let b = spec.len();
    let n = nodes.len();
    let lambda = config.lambda();
    let kh = config.k_mat() * h;
    let psi_h = config.psi() * h;

    let mut base = vec![0.0; n];
    let mut w = DMatrix::zeros(b, n);
    let mut x = DVector::zeros(p);
    let mut y = DVector::zeros(k);
    let mut wcol = vec![0.0; b];
    for i in 0..n {
        let col = nodes.points.column(i);
        for r in 0..p {
            x[r] = col[r];
        }
        for r in 0..k {
            y[r] = col[p + r];
        }
        let z = &y + config.psi() * &x;
        let t = config.k_mat() * &x + rule.gamma(&z, d) - &kh;
        base[i] = nodes.log_weights[i] + loss.eval(&t) / lambda;
        if b > 0 {
            let yh = &y + &psi_h;
            spec.w_vector_into(&yh, &mut wcol);
            for j in 0..b {
                w[(j, i)] = wcol[j];
            }
        }
    }
    Ok(TiltedNodes { base, w })
}

/// Log of the tilted expectation `log sum_i exp(base_i + beta' W_i)` as a
/// smooth convex function of `beta`, with analytic gradient and Hessian
/// (softmax mean and covariance of the moment columns).
pub(crate) struct BetaObjective<'a> {
    base: &'a [f64],
    w: &'a DMatrix<f64>,
}

impl<'a> BetaObjective<'a> {
    pub(crate) fn new(base: &'a [f64], w: &'a DMatrix<f64>) -> Self {
        Self { base, w }
    }

    fn scores(&self, beta: &DVector<f64>) -> Vec<f64> {
        let n = self.base.len();
        let mut s = self.base.to_vec();
        if !beta.is_empty() {
            let tilt = self.w.tr_mul(beta);
            for i in 0..n {
                s[i] += tilt[i];
            }
        }
        s
    }

    fn max_score(&self, beta: &DVector<f64>) -> f64 {
        self.scores(beta).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl SmoothObjective for BetaObjective<'_> {
    fn value(&self, beta: &DVector<f64>) -> f64 {
        log_sum_exp(&self.scores(beta))
    }

    fn value_grad_hess(&self, beta: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let b = beta.len();
        let n = self.base.len();
        let scores = self.scores(beta);
        let lse = log_sum_exp(&scores);
        let mut grad = DVector::zeros(b);
        let mut hess = DMatrix::zeros(b, b);
        for i in 0..n {
            let p = (scores[i] - lse).exp();
            if p == 0.0 {
                continue;
            }
            let wi = self.w.column(i);
            for r in 0..b {
                let pw = p * wi[r];
                grad[r] += pw;
                for c in 0..=r {
                    hess[(r, c)] += pw * wi[c];
                }
            }
        }
        for r in 0..b {
            for c in 0..r {
                hess[(c, r)] = hess[(r, c)];
            }
        }
        // Softmax covariance: E[ww'] - E[w]E[w]'.
        hess -= &grad * grad.transpose();
        (lse, grad, hess)
    }
}

/// Minimizes a smooth convex objective with compact sublevel sets over the
/// multiplier vector, by Newton with backtracking from `beta0`. Gradient and
/// Hessian come from the same integration nodes as the objective.
pub fn beta_minimize<O: SmoothObjective>(
    objective: &O,
    beta0: &DVector<f64>,
    tol: f64,
) -> (DVector<f64>, SolveDiagnostics) {
    let opts = NewtonOptions { gradient_tol: tol, ..Default::default() };
    newton_minimize(objective, beta0, &opts)
}

/// The finite-`M` dual risk
/// `lambda * log inf_beta E_h[exp(loss(delta - K h)/lambda + beta' W_{M,h})]`,
/// with `beta` restricted to the nonnegative orthant when `nonneg_beta` is
/// set (the moment-inequality variant). Equivariant rules make the value
/// independent of `h`; pass `None` to evaluate at the origin.
pub fn finite_m_dual_risk(
    config: &LimitExperimentConfig,
    rule: &RuleSpec,
    loss: &LossSpec,
    m: usize,
    h: Option<&DVector<f64>>,
    settings: &IntegratorSettings,
    nonneg_beta: bool,
) -> Result<RiskReport> {
    rule.validate(config)?;
    let zero_h = DVector::zeros(config.p());
    let h = h.unwrap_or(&zero_h);
    if h.len() != config.p() {
        return Err(Error::dim(format!("h must have length {}", config.p())));
    }

    let known = if loss.is_squared() {
        squared_loss_divergence(config, rule, MomentOrder::Finite(m))?
    } else {
        None
    };
    if known == Some(true) {
        return Ok(RiskReport::infinite());
    }

    let spec = MomentVectorSpec::new(config.omega(), m)?;
    let nodes = build_tilted_nodes(config, rule, loss, &spec, h, settings)?;
    let objective = BetaObjective::new(&nodes.base, &nodes.w);
    let lambda = config.lambda();

    if spec.is_empty() {
        let value = lambda * log_sum_exp(&nodes.base);
        if known.is_none() && nodes.base.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            > OVERFLOW_GUARD
        {
            return Ok(RiskReport::infinite());
        }
        return Ok(RiskReport::exact(value));
    }

    let beta0 = DVector::zeros(spec.len());
    let opts = NewtonOptions {
        gradient_tol: settings.tol,
        nonnegative: nonneg_beta,
        ..Default::default()
    };
    let (beta, diag) = newton_minimize(&objective, &beta0, &opts);
    if diag.status == SolveStatus::DivergedToInfinity
        || (known.is_none() && objective.max_score(&beta) > OVERFLOW_GUARD)
    {
        return Ok(RiskReport::infinite());
    }
    Ok(RiskReport {
        value: lambda * diag.value,
        beta_star: Some(beta),
        iterations: diag.iterations,
        gradient_norm: diag.gradient_norm,
        status: diag.status,
    })
}

/// The full-moment risk
/// `lambda * E_Y[ log E_{X|Y}[ exp(loss(delta)/lambda) | Y ] ]` at `h = 0`,
/// by nested quadrature: inner over `X | Y`, outer over `Y`.
pub fn infinite_m_risk(
    config: &LimitExperimentConfig,
    rule: &RuleSpec,
    loss: &LossSpec,
    settings: &IntegratorSettings,
) -> Result<RiskReport> {
    rule.validate(config)?;
    let known = if loss.is_squared() {
        squared_loss_divergence(config, rule, MomentOrder::Infinite)?
    } else {
        None
    };
    if known == Some(true) {
        return Ok(RiskReport::infinite());
    }

    let cond = conditional_x_given_y(config)?;
    let p = config.p();
    let k = config.k();
    let d = config.d();
    let lambda = config.lambda();

    // Above the quadrature dimension limit, the draw budget is split so that
    // outer draws times inner draws stays near mc_draws. Inner nodes for
    // X | Y share one standard-normal point set, shifted by the conditional
    // mean per outer node (common random numbers).
    let (outer_settings, inner_settings) = if p + k <= IntegratorSettings::MAX_QUADRATURE_DIM {
        (settings.clone(), settings.clone())
    } else {
        let n_inner = (settings.mc_draws as f64).sqrt().ceil() as usize;
        let n_inner = n_inner.clamp(256, 4096);
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
    let outer = GaussianNodes::build(&DVector::zeros(k), config.omega(), &outer_settings)?;
    let inner = GaussianNodes::build(&DVector::zeros(p), &cond.cond_cov, &inner_settings)?;

    let n_in = inner.len();
    let mut outer_sum = 0.0;
    let mut exponents = vec![0.0; n_in];
    let mut boundary_suspect = false;
    let mut y = DVector::zeros(k);
    for j in 0..outer.len() {
        let col = outer.points.column(j);
        for r in 0..k {
            y[r] = col[r];
        }
        let mean_x = &cond.slope * &y;
        for l in 0..n_in {
            let x = &mean_x + inner.points.column(l);
            let z = &y + config.psi() * &x;
            let t = config.k_mat() * &x + rule.gamma(&z, d);
            exponents[l] = inner.log_weights[l] + loss.eval(&t) / lambda;
        }
        if known.is_none() && p == 1 && inner.is_quadrature {
            // Integrand still growing at the extreme inner nodes means the
            // conditional expectation cannot be trusted to be finite.
            let m = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if exponents[0] >= m || exponents[n_in - 1] >= m {
                boundary_suspect = true;
            }
        }
        outer_sum += outer.log_weights[j].exp() * log_sum_exp(&exponents);
    }
    if boundary_suspect {
        return Ok(RiskReport::infinite());
    }
    Ok(RiskReport::exact(lambda * outer_sum))
}

/// An exact finite-state-space instance of the penalized worst-case problem,
/// used as the primal oracle for duality testing.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FiniteSpacePrimal {
    /// Baseline probabilities, strictly positive, summing to one.
    pub q: Vec<f64>,
    /// Loss value at each atom.
    pub loss: Vec<f64>,
    /// Moment row per atom; must be centered under `q`. Empty rows (or an
    /// empty list with `q` nonempty) mean no constraints.
    pub phi: Vec<Vec<f64>>,
    pub lambda: f64,
}

impl FiniteSpacePrimal {
    pub fn n_atoms(&self) -> usize {
        self.q.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.phi.first().map_or(0, |r| r.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q.len();
        if n == 0 || self.loss.len() != n {
            return Err(Error::dim("q and loss must be nonempty and equal length"));
        }
        if !self.phi.is_empty() && self.phi.len() != n {
            return Err(Error::dim("phi must have one row per atom"));
        }
        let b = self.n_constraints();
        if self.phi.iter().any(|r| r.len() != b) {
            return Err(Error::dim("phi rows must have equal length"));
        }
        if self.q.iter().any(|&qi| !(qi > 0.0)) {
            return Err(Error::Infeasible { context: "baseline weights must be strictly positive".into() });
        }
        let total: f64 = self.q.iter().sum();
        if (total - 1.0).abs() > 1e-8 {
            return Err(Error::Infeasible { context: format!("baseline weights sum to {total}, not 1") });
        }
        if !(self.lambda > 0.0) {
            return Err(Error::config("lambda must be positive"));
        }
        for j in 0..b {
            let c: f64 = (0..n).map(|i| self.q[i] * self.phi[i][j]).sum();
            if c.abs() > 1e-8 {
                return Err(Error::Infeasible {
                    context: format!("moment column {j} is not centered under q (mean {c})"),
                });
            }
        }
        Ok(())
    }
}

/// Solves `sup_p { sum p_i L_i - lambda KL(p || q) }` over the simplex
/// subject to `sum p_i phi_i = 0`, exactly, via the exponentially tilted
/// family `p_i(beta) ∝ q_i exp(L_i/lambda - beta' phi_i)` and damped Newton
/// root-finding on the moment map. Returns the optimum and the attaining
/// distribution.
pub fn primal_risk_finite_space(problem: &FiniteSpacePrimal) -> Result<(f64, Vec<f64>)> {
    problem.validate()?;
    let n = problem.n_atoms();
    let b = problem.n_constraints();
    let lambda = problem.lambda;
    let log_tilt: Vec<f64> = (0..n)
        .map(|i| problem.q[i].ln() + problem.loss[i] / lambda)
        .collect();

    let tilted = |beta: &DVector<f64>| -> Vec<f64> {
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let shift: f64 = (0..b).map(|j| beta[j] * problem.phi[i][j]).sum();
                log_tilt[i] - shift
            })
            .collect();
        let lse = log_sum_exp(&scores);
        scores.iter().map(|s| (s - lse).exp()).collect()
    };

    let moment_map = |p: &[f64]| -> DVector<f64> {
        DVector::from_fn(b, |j, _| (0..n).map(|i| p[i] * problem.phi[i][j]).sum())
    };

    let mut beta = DVector::zeros(b);
    if b > 0 {
        let scale: f64 = problem
            .phi
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0f64, |a, &v| a.max(v.abs()))
            .max(1.0);
        let mut converged = false;
        for _ in 0..200 {
            let p = tilted(&beta);
            let g = moment_map(&p);
            if g.amax() <= 1e-12 * scale {
                converged = true;
                break;
            }
            // Jacobian of the moment map is minus the tilted covariance.
            let mut cov = DMatrix::zeros(b, b);
            let mean = &g;
            for i in 0..n {
                for r in 0..b {
                    for c in 0..=r {
                        cov[(r, c)] += p[i] * problem.phi[i][r] * problem.phi[i][c];
                    }
                }
            }
            for r in 0..b {
                for c in 0..r {
                    cov[(c, r)] = cov[(r, c)];
                }
            }
            cov -= mean * mean.transpose();
            let step = solve_spd(&cov, &g);
            // Backtrack on the moment-map norm.
            let g0 = g.norm();
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..50 {
                let cand = &beta + t * &step;
                let pc = tilted(&cand);
                if moment_map(&pc).norm() < g0 {
                    beta = cand;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if !converged {
            let p = tilted(&beta);
            let g = moment_map(&p);
            if g.amax() > 1e-9 * scale {
                return Err(Error::Infeasible {
                    context: format!(
                        "moment-map root finding stalled at |g| = {:.3e}",
                        g.amax()
                    ),
                });
            }
        }
    }

    let p = tilted(&beta);
    let mut value = 0.0;
    for i in 0..n {
        value += p[i] * problem.loss[i];
        if p[i] > 0.0 {
            value -= lambda * p[i] * (p[i] / problem.q[i]).ln();
        }
    }
    Ok((value, p))
}

fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let scale = m.diagonal().amax().max(1e-300);
    let mut ridge = 0.0;
    loop {
        let mut reg = m.clone();
        for j in 0..m.nrows() {
            reg[(j, j)] += ridge;
        }
        if let Some(chol) = reg.cholesky() {
            return chol.solve(rhs);
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 100.0 };
    }
}

/// The dual route on a finite space:
/// `lambda * log inf_beta sum_i q_i exp(L_i/lambda - beta' phi_i)`,
/// solved by Newton descent on the log objective. Paired with
/// [`primal_risk_finite_space`] this is the strong-duality check.
pub fn dual_risk_finite_space(
    problem: &FiniteSpacePrimal,
) -> Result<(f64, DVector<f64>, SolveDiagnostics)> {
    problem.validate()?;
    let n = problem.n_atoms();
    let b = problem.n_constraints();
    let base: Vec<f64> = (0..n)
        .map(|i| problem.q[i].ln() + problem.loss[i] / problem.lambda)
        .collect();
    // Moment columns enter with a minus sign in the dual exponent.
    let w = DMatrix::from_fn(b, n, |j, i| -problem.phi[i][j]);
    let objective = BetaObjective::new(&base, &w);
    let (beta, diag) = beta_minimize(&objective, &DVector::zeros(b), 1e-11);
    Ok((problem.lambda * diag.value, beta, diag))
}

/// Builds the worst-case tilted distribution for a finite-space dual solution
/// (used by the command-line duality check for reporting).
pub fn finite_space_tilted(problem: &FiniteSpacePrimal, beta: &DVector<f64>) -> Vec<f64> {
    let n = problem.n_atoms();
    let b = problem.n_constraints();
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let shift: f64 = (0..b).map(|j| beta[j] * problem.phi[i][j]).sum();
            problem.q[i].ln() + problem.loss[i] / problem.lambda - shift
        })
        .collect();
    let lse = log_sum_exp(&scores);
    scores.iter().map(|s| (s - lse).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_cfg(omega: f64, lambda: f64) -> LimitExperimentConfig {
        LimitExperimentConfig::normalized_scalar(omega, lambda).unwrap()
    }

    fn settings() -> IntegratorSettings {
        IntegratorSettings::default()
    }

    #[test]
    fn mgf_examples() {
        // Degenerate variance.
        assert!((mgf_squared_gaussian(1.5, 0.0, 0.3) - (0.3 * 2.25f64).exp()).abs() < 1e-14);
        // (0, 1, 1/4) -> sqrt(2).
        assert!((mgf_squared_gaussian(0.0, 1.0, 0.25) - 2.0f64.sqrt()).abs() < 1e-14);
        // Boundary.
        assert_eq!(mgf_squared_gaussian(0.0, 1.0, 0.5), f64::INFINITY);
        assert_eq!(mgf_squared_gaussian(2.0, 1.0, 0.7), f64::INFINITY);
    }

    #[test]
    fn mgf_against_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000_000usize;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let u = crate::quad::standard_normal(&mut rng);
            let v = (0.25 * u * u).exp();
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = mgf_squared_gaussian(0.0, 1.0, 0.25);
        assert!((exact - mean).abs() < 3.0 * se, "exact {exact} vs mc {mean} +- {se}");
    }

    #[test]
    fn dual_risk_zero_rule_m1_matches_closed_form() {
        // E[exp(X^2/4)] = sqrt(2) and the symmetric tilt is minimized at
        // beta = 0, so the value is 4 log sqrt(2) = 2 log 2.
        let cfg = scalar_cfg(2.0, 4.0);
        let report = finite_m_dual_risk(
            &cfg,
            &RuleSpec::Zero,
            &LossSpec::Squared,
            1,
            None,
            &settings(),
            false,
        )
        .unwrap();
        assert_eq!(report.status, SolveStatus::Converged);
        assert!((report.value - 2.0 * 2.0f64.ln()).abs() < 1e-6, "value {}", report.value);
        assert!(report.beta_star.unwrap().amax() < 1e-6);
    }

    #[test]
    fn dual_risk_m2_matches_hand_minimization() {
        // At Omega = 2, lambda = 4 the M = 2 objective reduces to
        // sqrt(4/3) exp(-2 b) (2/3 - 4 b)^{-1/2}, minimized at b = -1/12 with
        // value -2 log(3/4) + 2/3.
        let cfg = scalar_cfg(2.0, 4.0);
        let report = finite_m_dual_risk(
            &cfg,
            &RuleSpec::Zero,
            &LossSpec::Squared,
            2,
            None,
            &settings(),
            false,
        )
        .unwrap();
        let expected = -2.0 * (0.75f64).ln() + 2.0 / 3.0;
        assert!((report.value - expected).abs() < 1e-6, "value {}", report.value);
        let beta = report.beta_star.unwrap();
        assert!(beta[0].abs() < 1e-6);
        assert!((beta[1] + 1.0 / 12.0).abs() < 1e-6, "beta2 {}", beta[1]);
    }

    #[test]
    fn nonnegative_beta_clamps_to_multiplier_value() {
        // The unconstrained M = 2 optimum has beta_2 = -1/12 < 0; restricted
        // to beta >= 0 the best choice is beta = 0, the plain multiplier dual.
        let cfg = scalar_cfg(2.0, 4.0);
        let report = finite_m_dual_risk(
            &cfg,
            &RuleSpec::Zero,
            &LossSpec::Squared,
            2,
            None,
            &settings(),
            true,
        )
        .unwrap();
        assert!((report.value - 2.0 * 2.0f64.ln()).abs() < 1e-6);
        let beta = report.beta_star.unwrap();
        assert!(beta.min() >= 0.0);
        assert!(beta.amax() < 1e-6);
    }

    #[test]
    fn lambda_limit_recovers_plain_risk() {
        // As lambda grows the multiplier risk tends to E[|K X|^2] = K I0^{-1} K'.
        let cfg = scalar_cfg(2.0, 1000.0);
        let report = finite_m_dual_risk(
            &cfg,
            &RuleSpec::Zero,
            &LossSpec::Squared,
            0,
            None,
            &settings(),
            false,
        )
        .unwrap();
        assert!((report.value - 1.0).abs() < 0.01, "value {}", report.value);
    }

    #[test]
    fn equivariance_makes_value_h_free() {
        let cfg = scalar_cfg(2.0, 4.0);
        let mut values = Vec::new();
        for h in [-2.0, 0.0, 3.0] {
            let hv = DVector::from_vec(vec![h]);
            let r = finite_m_dual_risk(
                &cfg,
                &RuleSpec::linear_scalar(0.3),
                &LossSpec::Squared,
                1,
                Some(&hv),
                &settings(),
                false,
            )
            .unwrap();
            values.push(r.value);
        }
        assert!((values[0] - values[1]).abs() < 1e-9);
        assert!((values[2] - values[1]).abs() < 1e-9);
    }

    #[test]
    fn infinite_m_risk_examples() {
        let cfg = scalar_cfg(2.0, 4.0);
        // Closed form for the zero rule: -2 log(3/4) + 2/3.
        let r = infinite_m_risk(&cfg, &RuleSpec::Zero, &LossSpec::Squared, &settings()).unwrap();
        let expected = -2.0 * (0.75f64).ln() + 2.0 / 3.0;
        assert!(
            (r.value - expected).abs() < 1e-3 * expected,
            "value {} expected {expected}",
            r.value
        );

        // The moment rule delta = Y is Y-measurable: the inner log-expectation
        // collapses and the risk is exactly Omega.
        let gmm = RuleSpec::gmm(&cfg).unwrap();
        assert!((gmm.gamma_scalar(1.0) - 1.0).abs() < 1e-12);
        let r = infinite_m_risk(&cfg, &gmm, &LossSpec::Squared, &settings()).unwrap();
        assert!((r.value - 2.0).abs() < 1e-9, "value {}", r.value);

        // MGF boundary: lambda = 2 Var(X|Y) = 1 diverges exactly.
        let cfg_boundary = scalar_cfg(2.0, 1.0);
        let r = infinite_m_risk(&cfg_boundary, &RuleSpec::Zero, &LossSpec::Squared, &settings())
            .unwrap();
        assert_eq!(r.value, f64::INFINITY);
        assert_eq!(r.status, SolveStatus::DivergedToInfinity);
    }

    #[test]
    fn risk_is_monotone_in_lambda_and_m() {
        let lambdas = [0.25, 1.0, 4.0, 16.0];
        let mut previous = f64::INFINITY;
        for &lam in &lambdas {
            let cfg = scalar_cfg(2.0, lam);
            let r = finite_m_dual_risk(
                &cfg,
                &RuleSpec::Zero,
                &LossSpec::Squared,
                0,
                None,
                &settings(),
                false,
            )
            .unwrap();
            assert!(
                r.value <= previous + 1e-9,
                "risk should be nonincreasing in lambda: {} then {}",
                previous,
                r.value
            );
            previous = r.value;
        }

        // Nesting in M at lambda = 4: 2 log 2 >= 2 log 2 >= -2 log(3/4) + 2/3.
        let cfg = scalar_cfg(2.0, 4.0);
        let vals: Vec<f64> = (0..=2)
            .map(|m| {
                finite_m_dual_risk(
                    &cfg,
                    &RuleSpec::Zero,
                    &LossSpec::Squared,
                    m,
                    None,
                    &settings(),
                    false,
                )
                .unwrap()
                .value
            })
            .collect();
        assert!((vals[0] - 2.0 * 2.0f64.ln()).abs() < 1e-6);
        assert!(vals[0] >= vals[1] - 1e-9);
        assert!(vals[1] >= vals[2] - 1e-9);
        assert!((vals[2] - (-2.0 * 0.75f64.ln() + 2.0 / 3.0)).abs() < 1e-4);
        let inf = infinite_m_risk(&cfg, &RuleSpec::Zero, &LossSpec::Squared, &settings())
            .unwrap()
            .value;
        assert!(vals[2] >= inf - 1e-4);

        // Risk dominates the unpenalized expected loss (P = Q is feasible).
        let plain = 1.0; // E[X^2] under the normalized law
        assert!(inf >= plain - 1e-9);
    }

    #[test]
    fn three_atom_duality_instance() {
        // Atoms {-1, 0, 1}, uniform q, L = x^2, phi = x, lambda = 1: by
        // symmetry beta* = 0 and the value is log((2e + 1)/3).
        let problem = FiniteSpacePrimal {
            q: vec![1.0 / 3.0; 3],
            loss: vec![1.0, 0.0, 1.0],
            phi: vec![vec![-1.0], vec![0.0], vec![1.0]],
            lambda: 1.0,
        };
        let expected = ((2.0 * std::f64::consts::E + 1.0) / 3.0).ln();
        let (primal, p) = primal_risk_finite_space(&problem).unwrap();
        assert!((primal - expected).abs() < 1e-10, "primal {primal} vs {expected}");
        assert!((p[0] - p[2]).abs() < 1e-10, "worst case should be symmetric");
        let (dual, beta, _) = dual_risk_finite_space(&problem).unwrap();
        assert!((dual - expected).abs() < 1e-9);
        assert!(beta.amax() < 1e-9);
    }

    #[test]
    fn three_atom_value_matches_simplex_grid_oracle() {
        // Oracle: the moment constraint p_1 = p_3 reduces the feasible set to
        // the segment p = (t, 1 - 2t, t); scan it at step 1e-3 and compare
        // the best objective value (grid curvature costs O(step^2)).
        let problem = FiniteSpacePrimal {
            q: vec![1.0 / 3.0; 3],
            loss: vec![1.0, 0.0, 1.0],
            phi: vec![vec![-1.0], vec![0.0], vec![1.0]],
            lambda: 1.0,
        };
        let (primal, _) = primal_risk_finite_space(&problem).unwrap();
        let mut best = f64::NEG_INFINITY;
        let steps = 500usize;
        for i in 1..steps {
            let t = 0.5 * i as f64 / steps as f64;
            let p = [t, 1.0 - 2.0 * t, t];
            let mut value = 0.0;
            for (pi, (li, qi)) in p.iter().zip(problem.loss.iter().zip(&problem.q)) {
                value += pi * li;
                if *pi > 0.0 {
                    value -= pi * (pi / qi).ln();
                }
            }
            best = best.max(value);
        }
        assert!(
            (primal - best).abs() < 1e-5,
            "solver {primal} vs grid oracle {best}"
        );
        assert!(primal >= best - 1e-12, "solver may not fall below a feasible value");
    }

    #[test]
    fn primal_special_cases() {
        // No constraints: the multiplier closed form.
        let problem = FiniteSpacePrimal {
            q: vec![0.25, 0.75],
            loss: vec![2.0, 0.5],
            phi: vec![],
            lambda: 2.0,
        };
        let (value, _) = primal_risk_finite_space(&problem).unwrap();
        let expected = 2.0 * (0.25 * (2.0f64 / 2.0).exp() + 0.75 * (0.5f64 / 2.0).exp()).ln();
        assert!((value - expected).abs() < 1e-12);

        // Constant loss: KL = 0 at p = q, value = c.
        let problem = FiniteSpacePrimal {
            q: vec![0.5, 0.25, 0.25],
            loss: vec![3.0, 3.0, 3.0],
            phi: vec![vec![1.0], vec![-1.0], vec![-1.0]],
            lambda: 1.0,
        };
        let (value, p) = primal_risk_finite_space(&problem).unwrap();
        assert!((value - 3.0).abs() < 1e-10);
        for (pi, qi) in p.iter().zip(&problem.q) {
            assert!((pi - qi).abs() < 1e-9);
        }
    }

    #[test]
    fn primal_rejects_uncentered_moments() {
        let problem = FiniteSpacePrimal {
            q: vec![0.5, 0.5],
            loss: vec![1.0, 0.0],
            phi: vec![vec![1.0], vec![1.0]],
            lambda: 1.0,
        };
        assert!(matches!(
            primal_risk_finite_space(&problem),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn random_duality_gap_is_negligible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..25 {
            let n = 3 + (trial % 6);
            let b = 1 + (trial % 3);
            let lambda = [0.5, 1.0, 4.0][trial % 3];
            let problem = random_instance(&mut rng, n, b, lambda);
            let (primal, _) = primal_risk_finite_space(&problem).unwrap();
            let (dual, _, _) = dual_risk_finite_space(&problem).unwrap();
            let tol = 1e-6 * (1.0 + primal.abs());
            assert!(
                (primal - dual).abs() <= tol,
                "trial {trial}: primal {primal} dual {dual}"
            );
        }
    }

    pub(crate) fn random_instance(
        rng: &mut ChaCha8Rng,
        n: usize,
        b: usize,
        lambda: f64,
    ) -> FiniteSpacePrimal {
        use rand::Rng;
        let mut q: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.1).collect();
        let total: f64 = q.iter().sum();
        for v in &mut q {
            *v /= total;
        }
        let loss: Vec<f64> = (0..n).map(|_| 3.0 * rng.gen::<f64>()).collect();
        let mut phi: Vec<Vec<f64>> =
            (0..n).map(|_| (0..b).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
        for j in 0..b {
            let mean: f64 = (0..n).map(|i| q[i] * phi[i][j]).sum();
            for i in 0..n {
                phi[i][j] -= mean;
            }
        }
        FiniteSpacePrimal { q, loss, phi, lambda }
    }

    #[test]
    fn rule_spec_json_round_trip() {
        let rules = vec![
            RuleSpec::Zero,
            RuleSpec::linear_scalar(0.4),
            RuleSpec::SoftThreshold { tau: 0.7 },
            RuleSpec::Erm { tau: 1.2 },
            RuleSpec::Spline { knots: vec![-1.0, 0.0, 1.0], values: vec![-0.5, 0.0, 0.5] },
        ];
        for rule in rules {
            let text = rule.to_json().to_string();
            let back = RuleSpec::from_json(&text).unwrap();
            assert_eq!(rule, back);
        }
    }

    #[test]
    fn shrinkage_rules_require_normalized_scalar() {
        let cfg = LimitExperimentConfig::new(
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            1.0,
        )
        .unwrap();
        let rule = RuleSpec::SoftThreshold { tau: 1.0 };
        assert!(matches!(rule.validate(&cfg), Err(Error::Unsupported { .. })));
    }

    #[test]
    fn custom_loss_spot_check() {
        let good = LossSpec::Custom(Arc::new(|u: &DVector<f64>| u.norm_squared().sqrt()));
        assert!(good.spot_check(1, 3).is_ok());
        let bad = LossSpec::Custom(Arc::new(|u: &DVector<f64>| -u.norm_squared()));
        assert!(bad.spot_check(1, 3).is_err());
        let nonconvex = LossSpec::Custom(Arc::new(|u: &DVector<f64>| u.norm_squared().sin().abs()));
        assert!(nonconvex.spot_check(1, 3).is_err());
    }
}
