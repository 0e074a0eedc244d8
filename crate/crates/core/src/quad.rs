//! Gauss-Hermite quadrature and Monte Carlo node generation for Gaussian
//! expectations.
//!
//! All rules are expressed against the standard normal weight: a rule of
//! degree `n` returns nodes `t_i` and weights `w_i` with
//! `E[f(Z)] ≈ Σ w_i f(t_i)` for `Z ~ N(0,1)`.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use once_cell::sync::Lazy;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Mutex;

/// Settings shared by every integral-backed risk evaluation.
///
/// Tensor-product Gauss-Hermite is used when the total Gaussian dimension is
/// at most [`IntegratorSettings::MAX_QUADRATURE_DIM`]; above that the backend
/// switches to seeded Monte Carlo. Within one solve all objective, gradient,
/// and Hessian evaluations reuse the same nodes (common random numbers).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntegratorSettings {
    /// Gauss-Hermite nodes per Gaussian dimension.
    pub nodes: usize,
    /// Monte Carlo draw count when quadrature is not applicable.
    pub mc_draws: usize,
    /// Seed for the Monte Carlo backend.
    pub seed: u64,
    /// Convergence tolerance handed to solvers.
    pub tol: f64,
}

impl IntegratorSettings {
    pub const MAX_QUADRATURE_DIM: usize = 3;
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self { nodes: 128, mc_draws: 1_000_000, seed: 0, tol: 1e-8 }
    }
}

/// A quadrature rule: nodes and matching weights.
pub type HermiteRule = Arc<(Vec<f64>, Vec<f64>)>;

static HERMITE_CACHE: Lazy<Mutex<HashMap<usize, HermiteRule>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

/// Nodes and weights of the `n`-point Gauss-Hermite rule for the standard
/// normal weight. Nodes come from the probabilists' Jacobi matrix, polished
/// by Newton on the orthonormal recurrence; weights use the Christoffel
/// identity `w_i = 1 / sum_{k<n} p_k(x_i)^2`, which stays accurate in the
/// far tail where eigenvector components drown in roundoff. Nodes are sorted
/// ascending and symmetrized so `t_i = -t_{n-1-i}` exactly.
pub fn gauss_hermite(n: usize) -> HermiteRule {
    assert!(n >= 1, "quadrature degree must be positive");
    if let Some(hit) = HERMITE_CACHE.lock().unwrap().get(&n) {
        return hit.clone();
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for j in 1..n {
        let b = (j as f64).sqrt();
        jacobi[(j - 1, j)] = b;
        jacobi[(j, j - 1)] = b;
    }
    let eig = jacobi.symmetric_eigen();
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Newton polish: p_n(x) = 0 with p_n'(x) = sqrt(n) p_{n-1}(x).
        for _ in 0..3 {
            let (pn, pn1) = hermite_pair(n, nodes[i]);
            let dp = (n as f64).sqrt() * pn1;
            if dp != 0.0 {
                let step = pn / dp;
                if step.is_finite() && step.abs() < 1.0 {
                    nodes[i] -= step;
                }
            }
        }
        weights[i] = 1.0 / christoffel_sum(n, nodes[i]);
    }

    for i in 0..n / 2 {
        let j = n - 1 - i;
        let t = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -t;
        nodes[j] = t;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let arc = Arc::new((nodes, weights));
    HERMITE_CACHE.lock().unwrap().insert(n, arc.clone());
    arc
}

/// `(p_n(x), p_{n-1}(x))` for the orthonormal probabilists' Hermite family:
/// `p_0 = 1`, `p_1 = x`, `p_{k+1} = (x p_k - sqrt(k) p_{k-1}) / sqrt(k+1)`.
fn hermite_pair(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 1.0f64;
    let mut cur = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

/// `sum_{k=0}^{n-1} p_k(x)^2`, the reciprocal Christoffel function. At the
/// extreme node of a 128-point rule this is around 1e100, well inside f64
/// range.
fn christoffel_sum(n: usize, x: f64) -> f64 {
    let mut prev = 1.0f64;
    let mut cur = x;
    let mut sum = 1.0 + x * x;
    if n == 1 {
        return 1.0;
    }
    for k in 1..n - 1 {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
        sum += next * next;
    }
    sum
}

/// A weighted point set representing the law `N(mean, cov)`.
///
/// `points` holds one column per node; `log_weights` are log quadrature
/// weights (`-log N` for Monte Carlo draws).
pub struct GaussianNodes {
    pub points: DMatrix<f64>,
    pub log_weights: Vec<f64>,
    pub is_quadrature: bool,
}

impl GaussianNodes {
    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    /// Builds nodes for `N(mean, cov)`: a tensor Gauss-Hermite grid when the
    /// dimension allows it, otherwise seeded Monte Carlo draws.
    pub fn build(
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        settings: &IntegratorSettings,
    ) -> crate::Result<Self> {
        let dim = mean.len();
        assert_eq!(cov.nrows(), dim);
        let chol = psd_factor(cov)
            .ok_or(crate::Error::NotSpd { name: "integration covariance" })?;
        if dim <= IntegratorSettings::MAX_QUADRATURE_DIM {
            Ok(Self::tensor_grid(mean, &chol, settings.nodes))
        } else {
            Ok(Self::monte_carlo(mean, &chol, settings.mc_draws, settings.seed))
        }
    }

    fn tensor_grid(mean: &DVector<f64>, chol: &DMatrix<f64>, n: usize) -> Self {
        let dim = mean.len();
        let rule = gauss_hermite(n);
        let (t, w) = (&rule.0, &rule.1);
        let total = n.pow(dim as u32);
        let mut points = DMatrix::zeros(dim, total);
        let mut log_weights = vec![0.0; total];
        let log_w: Vec<f64> = w.iter().map(|x| x.ln()).collect();
        let mut u = DVector::zeros(dim);
        for idx in 0..total {
            let mut rem = idx;
            let mut lw = 0.0;
            for d in 0..dim {
                let i = rem % n;
                rem /= n;
                u[d] = t[i];
                lw += log_w[i];
            }
            let x = mean + chol * &u;
            points.set_column(idx, &x);
            log_weights[idx] = lw;
        }
        Self { points, log_weights, is_quadrature: true }
    }

    fn monte_carlo(mean: &DVector<f64>, chol: &DMatrix<f64>, draws: usize, seed: u64) -> Self {
        let dim = mean.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = DMatrix::zeros(dim, draws);
        let mut u = DVector::zeros(dim);
        for idx in 0..draws {
            for d in 0..dim {
                u[d] = standard_normal(&mut rng);
            }
            let x = mean + chol * &u;
            points.set_column(idx, &x);
        }
        let lw = -(draws as f64).ln();
        Self { points, log_weights: vec![lw; draws], is_quadrature: false }
    }
}

/// Cholesky-like factor `L` with `L L' = cov` that also accepts positive
/// semidefinite input by pivoting out negligible directions.
pub fn psd_factor(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(chol) = cov.clone().cholesky() {
        return Some(chol.l());
    }
    // Semidefinite fallback via symmetric eigendecomposition.
    let eig = cov.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let floor = -1e-10 * scale.max(1.0);
    let n = cov.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let ev = eig.eigenvalues[j];
        if ev < floor {
            return None;
        }
        let s = ev.max(0.0).sqrt();
        for i in 0..n {
            l[(i, j)] = eig.eigenvectors[(i, j)] * s;
        }
    }
    Some(l)
}

/// One standard normal draw (Box-Muller, consuming two uniforms).
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Numerically stable log(Σ exp(v_i)).
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}
