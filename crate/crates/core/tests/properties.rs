//! Property tests for the structural invariants: law identities of the
//! experiment, moment-vector combinatorics, the Gaussian MGF against
//! quadrature, and strong duality on random finite spaces.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use limitrisk::quad::gauss_hermite;
use limitrisk::{
    conditional_x_given_y, dual_risk_finite_space, enumerate_multi_indices,
    gaussian_central_moment, joint_law, mgf_squared_gaussian, primal_risk_finite_space,
    FiniteSpacePrimal, LimitExperimentConfig, MultiIndex,
};

/// A random sane scalar-parameter configuration with a strictly positive
/// definite joint law.
fn scalar_config_strategy() -> impl Strategy<Value = LimitExperimentConfig> {
    (0.2f64..4.0, -2.0f64..2.0, 0.05f64..4.0, -3.0f64..3.0, 0.05f64..20.0).prop_filter_map(
        "joint covariance must be positive definite",
        |(i0, psi, slack, k, lambda)| {
            // Omega = psi^2 / i0 + slack keeps Var(Z) = slack > 0.
            let omega = psi * psi / i0 + slack;
            LimitExperimentConfig::new(
                DMatrix::from_element(1, 1, i0),
                DMatrix::from_element(1, 1, psi),
                DMatrix::from_element(1, 1, omega),
                DMatrix::from_element(1, 1, k),
                lambda,
            )
            .ok()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariant_statistic_is_uncorrelated_with_x(
        config in scalar_config_strategy(),
        h in -3.0f64..3.0,
    ) {
        let law = joint_law(&config, &DVector::from_element(1, h)).unwrap();
        let cross = law.cov_xy() + law.cov_xx() * config.psi().transpose();
        prop_assert!(cross.amax() < 1e-12);

        let z_var = law.cov_yy()
            + config.psi() * law.cov_xx() * config.psi().transpose()
            + config.psi() * law.cov_xy()
            + (config.psi() * law.cov_xy()).transpose();
        prop_assert!((z_var - config.invariant_cov()).amax() < 1e-10);
    }

    #[test]
    fn conditional_law_reconstructs_joint(config in scalar_config_strategy()) {
        let law = joint_law(&config, &DVector::zeros(1)).unwrap();
        let cond = conditional_x_given_y(&config).unwrap();
        let slope_var = &cond.slope * law.cov_yy();
        prop_assert!((slope_var - law.cov_xy()).amax() < 1e-10);
        let recon = &cond.cond_cov + &cond.slope * law.cov_yy() * cond.slope.transpose();
        prop_assert!((recon - law.cov_xx()).amax() < 1e-10);
    }

    #[test]
    fn multi_index_count_matches_binomial(k in 1usize..5, m in 0usize..7) {
        let list = enumerate_multi_indices(k, m);
        // C(k + M, M) - 1
        let mut expected = 1usize;
        for i in 1..=m {
            expected = expected * (k + i) / i;
        }
        prop_assert_eq!(list.len(), expected - 1);
        // Graded: orders are nondecreasing along the enumeration.
        let orders: Vec<usize> = list.iter().map(|mi| mi.order()).collect();
        prop_assert!(orders.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn odd_moments_vanish(
        entries in proptest::collection::vec(-1.0f64..1.0, 4),
        exps in proptest::collection::vec(0usize..4, 2),
    ) {
        let a = DMatrix::from_fn(2, 2, |i, j| entries[2 * i + j]);
        let omega = &a * a.transpose() + DMatrix::identity(2, 2) * 0.3;
        let m = MultiIndex { exponents: exps };
        if m.order() % 2 == 1 {
            prop_assert_eq!(gaussian_central_moment(&omega, &m).unwrap(), 0.0);
        }
    }

    #[test]
    fn mgf_matches_quadrature(
        mean in -2.0f64..2.0,
        var in 0.01f64..3.0,
        a in -1.0f64..0.45,
    ) {
        // Keep inside the finiteness region 2 a var < 1.
        let slack = 1.0 - 2.0 * a * var;
        prop_assume!(slack > 0.1);
        let closed = mgf_squared_gaussian(mean, var, a);
        let rule = gauss_hermite(96);
        let quad: f64 = rule
            .0
            .iter()
            .zip(&rule.1)
            .map(|(&t, &w)| {
                let u = mean + var.sqrt() * t;
                w * (a * u * u).exp()
            })
            .sum();
        // Quadrature convergence degrades as the boundary is approached, so
        // the tolerance scales with the inverse slack.
        let tol = 1e-6 / (slack * slack);
        prop_assert!(
            (closed - quad).abs() < tol * closed,
            "closed {} vs quadrature {} (slack {})",
            closed,
            quad,
            slack
        );
    }

    #[test]
    fn strong_duality_on_random_spaces(
        seedq in proptest::collection::vec(0.05f64..1.0, 2..8),
        raw_loss in proptest::collection::vec(0.0f64..3.0, 8),
        raw_phi in proptest::collection::vec(-1.0f64..1.0, 16),
        lambda in 0.4f64..6.0,
    ) {
        let n = seedq.len();
        let total: f64 = seedq.iter().sum();
        let q: Vec<f64> = seedq.iter().map(|v| v / total).collect();
        let loss: Vec<f64> = raw_loss[..n].to_vec();
        let b = 2usize.min(n - 1);
        let mut phi: Vec<Vec<f64>> =
            (0..n).map(|i| (0..b).map(|j| raw_phi[(i * b + j) % raw_phi.len()]).collect()).collect();
        for j in 0..b {
            let mean: f64 = (0..n).map(|i| q[i] * phi[i][j]).sum();
            for row in phi.iter_mut() {
                row[j] -= mean;
            }
        }
        let problem = FiniteSpacePrimal { q, loss, phi, lambda };
        let (primal, p) = primal_risk_finite_space(&problem).unwrap();
        let (dual, _, _) = dual_risk_finite_space(&problem).unwrap();
        prop_assert!((primal - dual).abs() <= 1e-6 * (1.0 + primal.abs()));
        // The worst case is a distribution.
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }
}
