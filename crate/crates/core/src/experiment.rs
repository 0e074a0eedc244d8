//! The Gaussian limit experiment: its parameterization, joint and conditional
//! laws, the invariant statistic, and seeded sampling.
//!
//! The experiment observes `(X, Y)` with `X ~ N(h, I0^{-1})` the efficient
//! statistic and `Y ~ N(-Psi h, Omega)` the scaled moment statistic, with
//! cross-covariance `-I0^{-1} Psi'`. The target is `K h`. The invariant
//! statistic `Z = Y + Psi X` is ancillary: its law does not depend on `h`,
//! and it is independent of `X`.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::quad::{psd_factor, standard_normal};
use crate::{Error, Result};

/// The matrices and scalar penalty weight that fully parameterize the limit
/// decision problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitExperimentConfig {
    i0: DMatrix<f64>,
    psi: DMatrix<f64>,
    omega: DMatrix<f64>,
    k_mat: DMatrix<f64>,
    lambda: f64,
    i0_inv: DMatrix<f64>,
}

impl LimitExperimentConfig {
    /// Validates shapes, SPD-ness of `I0` and `Omega` (by Cholesky), and
    /// positivity of `lambda`.
    pub fn new(
        i0: DMatrix<f64>,
        psi: DMatrix<f64>,
        omega: DMatrix<f64>,
        k_mat: DMatrix<f64>,
        lambda: f64,
    ) -> Result<Self> {
        let p = i0.nrows();
        if i0.ncols() != p {
            return Err(Error::dim("I0 must be square"));
        }
        let k = omega.nrows();
        if omega.ncols() != k {
            return Err(Error::dim("Omega must be square"));
        }
        if psi.nrows() != k || psi.ncols() != p {
            return Err(Error::dim(format!(
                "Psi must be {k}x{p} (moments x parameters), got {}x{}",
                psi.nrows(),
                psi.ncols()
            )));
        }
        if k_mat.ncols() != p {
            return Err(Error::dim(format!(
                "K must have {p} columns, got {}",
                k_mat.ncols()
            )));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::config(format!("lambda must be positive, got {lambda}")));
        }
        check_symmetric(&i0, "I0")?;
        check_symmetric(&omega, "Omega")?;
        let i0_chol = i0.clone().cholesky().ok_or(Error::NotSpd { name: "I0" })?;
        omega.clone().cholesky().ok_or(Error::NotSpd { name: "Omega" })?;
        let i0_inv = i0_chol.inverse();
        // The implied joint covariance must be a covariance: its Schur
        // complement Var(Z) = Omega - Psi I0^{-1} Psi' may be singular but
        // not indefinite.
        let z_var = &omega - &psi * &i0_inv * psi.transpose();
        let min_eig = z_var.symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-10 * omega.amax().max(1.0) {
            return Err(Error::NotSpd { name: "joint covariance" });
        }
        Ok(Self { i0, psi, omega, k_mat, lambda, i0_inv })
    }

    /// The scalar experiment normalized to `I0 = 1`, `Psi = -1`, `K = 1`,
    /// leaving `Omega` and `lambda` free.
    pub fn normalized_scalar(omega: f64, lambda: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, omega),
            DMatrix::from_element(1, 1, 1.0),
            lambda,
        )
    }

    /// Parses the shared JSON configuration document with keys
    /// `"I0"`, `"Psi"`, `"Omega"`, `"K"` (arrays of rows) and `"lambda"`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text)?;
        Self::new(
            matrix_from_rows(&raw.i0, "I0")?,
            matrix_from_rows(&raw.psi, "Psi")?,
            matrix_from_rows(&raw.omega, "Omega")?,
            matrix_from_rows(&raw.k, "K")?,
            raw.lambda,
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "I0": rows_of(&self.i0),
            "Psi": rows_of(&self.psi),
            "Omega": rows_of(&self.omega),
            "K": rows_of(&self.k_mat),
            "lambda": self.lambda,
        })
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(
            self.i0.clone(),
            self.psi.clone(),
            self.omega.clone(),
            self.k_mat.clone(),
            lambda,
        )
    }

    pub fn p(&self) -> usize {
        self.i0.nrows()
    }

    pub fn k(&self) -> usize {
        self.omega.nrows()
    }

    pub fn d(&self) -> usize {
        self.k_mat.nrows()
    }

    pub fn i0(&self) -> &DMatrix<f64> {
        &self.i0
    }

    pub fn i0_inv(&self) -> &DMatrix<f64> {
        &self.i0_inv
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn k_mat(&self) -> &DMatrix<f64> {
        &self.k_mat
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `Var(Z)` for the invariant statistic `Z = Y + Psi X`, namely
    /// `Omega - Psi I0^{-1} Psi'`.
    pub fn invariant_cov(&self) -> DMatrix<f64> {
        &self.omega - &self.psi * &self.i0_inv * self.psi.transpose()
    }

    /// True when `p = k = d = 1`.
    pub fn is_scalar(&self) -> bool {
        self.p() == 1 && self.k() == 1 && self.d() == 1
    }
}

fn check_symmetric(m: &DMatrix<f64>, name: &'static str) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::NotSpd { name });
            }
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawConfig {
    #[serde(rename = "I0")]
    i0: Vec<Vec<f64>>,
    #[serde(rename = "Psi")]
    psi: Vec<Vec<f64>>,
    #[serde(rename = "Omega")]
    omega: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    k: Vec<Vec<f64>>,
    lambda: f64,
}

fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::dim(format!("{name} must have at least one row")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::dim(format!("{name} rows must be nonempty and equal length")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// The Gaussian law of the stacked vector `(X, Y)` under local parameter `h`.
#[derive(Debug, Clone)]
pub struct JointGaussianLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    p: usize,
}

impl JointGaussianLaw {
    pub fn mean_x(&self) -> DVector<f64> {
        self.mean.rows(0, self.p).into()
    }

    pub fn mean_y(&self) -> DVector<f64> {
        self.mean.rows(self.p, self.mean.len() - self.p).into()
    }

    pub fn cov_xx(&self) -> DMatrix<f64> {
        self.cov.view((0, 0), (self.p, self.p)).into()
    }

    pub fn cov_xy(&self) -> DMatrix<f64> {
        let k = self.mean.len() - self.p;
        self.cov.view((0, self.p), (self.p, k)).into()
    }

    pub fn cov_yy(&self) -> DMatrix<f64> {
        let k = self.mean.len() - self.p;
        self.cov.view((self.p, self.p), (k, k)).into()
    }
}

/// The regression of `X` on `Y`: `X | Y = y` is Gaussian with mean
/// `h + slope (y + Psi h)` and covariance `cond_cov` free of `(h, y)`.
#[derive(Debug, Clone)]
pub struct ConditionalLawXGivenY {
    pub slope: DMatrix<f64>,
    pub cond_cov: DMatrix<f64>,
    psi: DMatrix<f64>,
}

impl ConditionalLawXGivenY {
    pub fn mean_at(&self, h: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        h + &self.slope * (y + &self.psi * h)
    }

    /// `E[Y]` under local parameter `h`.
    pub fn y_mean_of(&self, h: &DVector<f64>) -> DVector<f64> {
        -(&self.psi * h)
    }
}

/// The law of `(X, Y)` under local parameter `h`: mean `(h, -Psi h)` and
/// covariance `[[I0^{-1}, -I0^{-1} Psi'], [-Psi I0^{-1}, Omega]]`.
pub fn joint_law(config: &LimitExperimentConfig, h: &DVector<f64>) -> Result<JointGaussianLaw> {
    let p = config.p();
    let k = config.k();
    if h.len() != p {
        return Err(Error::dim(format!("h must have length {p}, got {}", h.len())));
    }
    let mut mean = DVector::zeros(p + k);
    mean.rows_mut(0, p).copy_from(h);
    mean.rows_mut(p, k).copy_from(&(-(config.psi() * h)));

    let i0_inv = config.i0_inv();
    let cross = -i0_inv * config.psi().transpose();
    let mut cov = DMatrix::zeros(p + k, p + k);
    cov.view_mut((0, 0), (p, p)).copy_from(i0_inv);
    cov.view_mut((0, p), (p, k)).copy_from(&cross);
    cov.view_mut((p, 0), (k, p)).copy_from(&cross.transpose());
    cov.view_mut((p, p), (k, k)).copy_from(config.omega());
    Ok(JointGaussianLaw { mean, cov, p })
}

/// The conditional law of `X` given `Y`: slope `-I0^{-1} Psi' Omega^{-1}` and
/// Schur-complement covariance `I0^{-1} - I0^{-1} Psi' Omega^{-1} Psi I0^{-1}`.
pub fn conditional_x_given_y(config: &LimitExperimentConfig) -> Result<ConditionalLawXGivenY> {
    let omega_chol = config
        .omega()
        .clone()
        .cholesky()
        .ok_or(Error::NotSpd { name: "Omega" })?;
    let omega_inv = omega_chol.inverse();
    let i0_inv = config.i0_inv();
    let slope = -(i0_inv * config.psi().transpose()) * &omega_inv;
    let cond_cov = i0_inv - i0_inv * config.psi().transpose() * &omega_inv * config.psi() * i0_inv;
    Ok(ConditionalLawXGivenY { slope, cond_cov, psi: config.psi().clone() })
}

/// The maximal invariant `Z = y + Psi x`.
pub fn invariant_statistic(
    config: &LimitExperimentConfig,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.len() != config.p() || y.len() != config.k() {
        return Err(Error::dim(format!(
            "expected x of length {} and y of length {}",
            config.p(),
            config.k()
        )));
    }
    Ok(y + config.psi() * x)
}

/// Draws `n_draws` i.i.d. pairs `(x, y)` from the joint law at `h`.
/// Deterministic given `seed`; the generator is stream-seeded so concurrent
/// callers never share state.
pub fn sample(
    config: &LimitExperimentConfig,
    h: &DVector<f64>,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    if n_draws == 0 {
        return Err(Error::config("n_draws must be at least 1"));
    }
    let law = joint_law(config, h)?;
    let chol = psd_factor(&law.cov).ok_or(Error::NotSpd { name: "joint covariance" })?;
    let p = config.p();
    let k = config.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_draws);
    let mut u = DVector::zeros(p + k);
    for _ in 0..n_draws {
        for d in 0..p + k {
            u[d] = standard_normal(&mut rng);
        }
        let v = &law.mean + &chol * &u;
        out.push((v.rows(0, p).into(), v.rows(p, k).into()));
    }
    Ok(out)
}
