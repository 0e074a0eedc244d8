//! Misspecification-robust risk evaluation and optimal estimation in
//! Gaussian limit experiments.
//!
//! The library evaluates KL-penalized worst-case (constrained-multiplier)
//! risks of decision rules, where an adversary may redistribute probability
//! mass subject to moment constraints on the invariant statistic. It solves
//! for optimal and adaptive rules and includes a finite-sample treatment
//! effect testbed that verifies plug-in estimators attain the limit risk.

pub mod adaptive;
pub mod ate;
pub mod error;
pub mod experiment;
pub mod moments;
pub mod quad;
pub mod risk;
pub mod rules;
pub mod solve;

pub use adaptive::{
    gamma_eval, optimize_spline, pointwise_optimal_risk, rule_risk_curve, tune_threshold,
    AdaptiveReport, LambdaGrid, ShrinkageFamily,
};
pub use ate::{
    ate_limit_matrices, mc_attainability, mle, plug_in_estimator, psi_eval, simulate_ate,
    AteConfig, AteDataset, AteUnit, AttainabilityReport, MleEstimate, PluginEstimate,
};
pub use error::{Error, Result};
pub use experiment::{
    conditional_x_given_y, invariant_statistic, joint_law, sample, ConditionalLawXGivenY,
    JointGaussianLaw, LimitExperimentConfig,
};
pub use moments::{
    enumerate_multi_indices, gaussian_central_moment, MomentVectorSpec, MultiIndex,
};
pub use quad::IntegratorSettings;
pub use risk::{
    beta_minimize, dual_risk_finite_space, finite_m_dual_risk, infinite_m_risk,
    mgf_squared_gaussian, primal_risk_finite_space, FiniteSpacePrimal, LossSpec, MomentOrder,
    RiskReport, RuleSpec,
};
pub use rules::{
    bayes_rule_tilted, joint_optimize, linear_risk_profile, linear_rule_risk_closed_form,
    optimal_rule, JointProblem, LinearRiskProfile,
};
pub use solve::{SolveDiagnostics, SolveStatus};
