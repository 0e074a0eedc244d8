//! Multi-index enumeration and centered Gaussian moments for the moment
//! vector `W`.
//!
//! `W` stacks, for every multi-index `m` with `1 <= |m| <= M`, the monomial
//! `prod_s v_s^{m_s}` of its argument minus the matching central moment of
//! `N(0, Omega)`. Components are ordered graded-lexicographically; the dual
//! multiplier vector `beta` is defined against this order everywhere.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Maximum supported total moment order. Requests beyond it error out rather
/// than silently truncating.
pub const MAX_ORDER: usize = 8;

/// Exponent vector `m` with total order `|m| = sum m_s`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex {
    pub exponents: Vec<usize>,
}

impl MultiIndex {
    pub fn order(&self) -> usize {
        self.exponents.iter().sum()
    }

    /// The monomial `prod_s v_s^{m_s}`.
    pub fn monomial(&self, v: &DVector<f64>) -> f64 {
        self.exponents
            .iter()
            .enumerate()
            .map(|(s, &m)| v[s].powi(m as i32))
            .product()
    }
}

/// All `m` in `N_0^k` with `1 <= |m| <= max_order`, in graded lexicographic
/// order (by total order, then lexicographically descending), no duplicates.
/// `max_order = 0` yields an empty list: the moment statistic plays no role.
pub fn enumerate_multi_indices(k: usize, max_order: usize) -> Vec<MultiIndex> {
    assert!(k >= 1, "k must be at least 1");
    let mut out = Vec::new();
    for grade in 1..=max_order {
        let mut current = vec![0usize; k];
        push_grade(k, grade, 0, &mut current, &mut out);
    }
    out
}

fn push_grade(
    k: usize,
    remaining: usize,
    coord: usize,
    current: &mut Vec<usize>,
    out: &mut Vec<MultiIndex>,
) {
    if coord == k - 1 {
        current[coord] = remaining;
        out.push(MultiIndex { exponents: current.clone() });
        return;
    }
    for e in (0..=remaining).rev() {
        current[coord] = e;
        push_grade(k, remaining - e, coord + 1, current, out);
    }
    current[coord] = 0;
}

/// `E[prod_s xi_s^{m_s}]` for `xi ~ N(0, omega)`: zero for odd `|m|`, and the
/// Isserlis pairing sum over perfect matchings otherwise. Matchings are
/// evaluated recursively with memoization on the sorted coordinate multiset.
pub fn gaussian_central_moment(omega: &DMatrix<f64>, m: &MultiIndex) -> Result<f64> {
    let k = omega.nrows();
    if m.exponents.len() != k {
        return Err(Error::dim(format!(
            "multi-index has {} coordinates, Omega is {k}x{k}",
            m.exponents.len()
        )));
    }
    let order = m.order();
    if order > MAX_ORDER {
        return Err(Error::UnsupportedOrder { order, max: MAX_ORDER });
    }
    if order % 2 == 1 {
        return Ok(0.0);
    }
    if order == 0 {
        return Ok(1.0);
    }
    let mut coords: Vec<u8> = Vec::with_capacity(order);
    for (s, &e) in m.exponents.iter().enumerate() {
        coords.extend(std::iter::repeat_n(s as u8, e));
    }
    let mut memo: HashMap<Vec<u8>, f64> = HashMap::new();
    Ok(pairing_sum(&coords, omega, &mut memo))
}

fn pairing_sum(coords: &[u8], omega: &DMatrix<f64>, memo: &mut HashMap<Vec<u8>, f64>) -> f64 {
    if coords.is_empty() {
        return 1.0;
    }
    if let Some(&v) = memo.get(coords) {
        return v;
    }
    let first = coords[0] as usize;
    let mut total = 0.0;
    for j in 1..coords.len() {
        let partner = coords[j] as usize;
        let mut rest: Vec<u8> = Vec::with_capacity(coords.len() - 2);
        rest.extend_from_slice(&coords[1..j]);
        rest.extend_from_slice(&coords[j + 1..]);
        total += omega[(first, partner)] * pairing_sum(&rest, omega, memo);
    }
    memo.insert(coords.to_vec(), total);
    total
}

/// The enumerated multi-indices together with their target central moments
/// under `N(0, Omega)`.
#[derive(Debug, Clone)]
pub struct MomentVectorSpec {
    pub indices: Vec<MultiIndex>,
    pub targets: DVector<f64>,
    k: usize,
}

impl MomentVectorSpec {
    pub fn new(omega: &DMatrix<f64>, max_order: usize) -> Result<Self> {
        if max_order > MAX_ORDER {
            return Err(Error::UnsupportedOrder { order: max_order, max: MAX_ORDER });
        }
        let k = omega.nrows();
        let indices = enumerate_multi_indices(k, max_order);
        let mut targets = DVector::zeros(indices.len());
        for (j, m) in indices.iter().enumerate() {
            targets[j] = gaussian_central_moment(omega, m)?;
        }
        Ok(Self { indices, targets, k })
    }

    /// Number of components `b`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Evaluates the centered moment vector at `y_h` (the caller supplies
    /// `Y + Psi h`): component `j` is `prod_s y_h_s^{m_js} - target_j`.
    pub fn w_vector(&self, y_h: &DVector<f64>) -> Result<DVector<f64>> {
        if y_h.len() != self.k {
            return Err(Error::dim(format!(
                "w_vector expects length {}, got {}",
                self.k,
                y_h.len()
            )));
        }
        let mut w = DVector::zeros(self.len());
        for (j, m) in self.indices.iter().enumerate() {
            w[j] = m.monomial(y_h) - self.targets[j];
        }
        Ok(w)
    }

    /// Writes `w_vector` into a preallocated slice (hot-path variant).
    pub fn w_vector_into(&self, y_h: &DVector<f64>, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        for (j, m) in self.indices.iter().enumerate() {
            out[j] = m.monomial(y_h) - self.targets[j];
        }
    }
}
