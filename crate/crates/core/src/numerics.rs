//! Dense symmetric-matrix utilities plus the Lyapunov and Riccati fixed-point
//! solvers the estimation and design code is built on.

use std::ops::Deref;

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that an input is symmetric.
const SYMMETRY_TOL: f64 = 1e-12;

/// A dense real symmetric matrix.
///
/// Covariances, stationary statistics and Riccati fixed points all travel as
/// this type. Construction checks symmetry; arithmetic results are
/// re-symmetrized with [`symmetrize`].
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps `m`, failing if it is not square or not symmetric to within
    /// `1e-12` relative to its largest entry.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_square(&m)?;
        if m.nrows() == 0 {
            return Err(Error::DimensionMismatch("matrix must have dim >= 1".into()));
        }
        let scale = m.amax().max(1.0);
        let asymmetry = (&m - m.transpose()).amax();
        if asymmetry > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric { asymmetry });
        }
        Ok(Self::from_symmetrized(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag)))
    }

    pub fn scalar(v: f64) -> Self {
        Self(DMatrix::from_element(1, 1, v))
    }

    /// Averages `m` with its transpose without any checks. Callers use this on
    /// products that are symmetric in exact arithmetic.
    pub(crate) fn from_symmetrized(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        Self((m + t) * 0.5)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.0.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// Spectral norm (largest absolute eigenvalue).
    pub fn norm(&self) -> f64 {
        self.eigenvalues().iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub fn cholesky(&self) -> Option<Cholesky<f64, Dyn>> {
        Cholesky::new(self.0.clone())
    }

    /// Inverse via Cholesky; fails if the matrix is not positive definite.
    pub fn inverse_pd(&self, what: &str) -> Result<SymMatrix> {
        let chol = self.cholesky().ok_or_else(|| Error::NotPositiveDefinite { what: what.into() })?;
        Ok(Self::from_symmetrized(chol.inverse()))
    }

    /// Congruence `T · self · Tᵀ`.
    pub fn congruence(&self, t: &DMatrix<f64>) -> SymMatrix {
        Self::from_symmetrized(t * &self.0 * t.transpose())
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        Self(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        Self(&self.0 - &other.0)
    }

    pub fn scale(&self, k: f64) -> SymMatrix {
        Self(&self.0 * k)
    }

    pub fn shift(&self, k: f64) -> SymMatrix {
        let n = self.dim();
        Self(&self.0 + DMatrix::identity(n, n) * k)
    }
}

impl Deref for SymMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl From<SymMatrix> for DMatrix<f64> {
    fn from(m: SymMatrix) -> Self {
        m.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub psd_slack: f64,
    pub fixed_point_tol: f64,
    pub max_iters: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { psd_slack: 1e-9, fixed_point_tol: 1e-10, max_iters: 10_000 }
    }
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NonSquare { rows: m.nrows(), cols: m.ncols() });
    }
    Ok(())
}

/// Returns `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> Result<SymMatrix> {
    check_square(m)?;
    if m.nrows() == 0 {
        return Err(Error::DimensionMismatch("matrix must have dim >= 1".into()));
    }
    Ok(SymMatrix::from_symmetrized(m.clone()))
}

pub fn min_eigenvalue(m: &SymMatrix) -> f64 {
    m.eigenvalues()[0]
}

/// `true` iff the smallest eigenvalue is at least `-psd_slack · (1 + ‖M‖)`.
pub fn is_psd(m: &SymMatrix, tol: &Tolerances) -> bool {
    let ev = m.eigenvalues();
    let norm = ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    ev[0] >= -tol.psd_slack * (1.0 + norm)
}

/// Loewner comparison `lo ⪯ hi` with the same relative slack as [`is_psd`].
pub fn loewner_le(lo: &SymMatrix, hi: &SymMatrix, tol: &Tolerances) -> bool {
    is_psd(&hi.sub(lo), tol)
}

/// Largest eigenvalue modulus of a general square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    check_square(a)?;
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    Ok(a.complex_eigenvalues().iter().fold(0.0_f64, |acc, z| acc.max(z.norm())))
}

fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(f64::MIN_POSITIVE)
}

/// Solves `Σ = A Σ Aᵀ + Q` for stable `A`.
///
/// Uses the squared fixed-point recursion `Σ ← Σ + Aₖ Σ Aₖᵀ, Aₖ₊₁ = Aₖ²`, which
/// sums the series `Σ Aᵏ Q Aᵏᵀ` in logarithmically many steps.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &SymMatrix) -> Result<SymMatrix> {
    check_square(a)?;
    if a.nrows() != q.dim() {
        return Err(Error::DimensionMismatch(format!("A is {}x{}, Q is {}x{}", a.nrows(), a.ncols(), q.dim(), q.dim())));
    }
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::Unstable { spectral_radius: rho });
    }
    let mut sigma = q.as_matrix().clone();
    let mut ak = a.clone();
    for _ in 0..200 {
        let term = &ak * &sigma * ak.transpose();
        sigma += &term;
        sigma = (&sigma + sigma.transpose()) * 0.5;
        if term.norm() <= f64::EPSILON * sigma.norm() {
            break;
        }
        ak = &ak * &ak;
    }
    let out = SymMatrix::from_symmetrized(sigma);
    let residual = lyapunov_residual(a, q, &out);
    if residual > 1e-9 {
        return Err(Error::NotConverged { iterations: 200, residual });
    }
    Ok(out)
}

/// `‖Σ − AΣAᵀ − Q‖ / ‖Σ‖` (Frobenius).
pub fn lyapunov_residual(a: &DMatrix<f64>, q: &SymMatrix, sigma: &SymMatrix) -> f64 {
    let r = sigma.as_matrix() - a * sigma.as_matrix() * a.transpose() - q.as_matrix();
    r.norm() / sigma.as_matrix().norm().max(f64::MIN_POSITIVE)
}

/// One application of the Riccati map
/// `g_W(X) = AXAᵀ + Q − AXCᵀ(CXCᵀ + W)⁻¹CXAᵀ`.
pub fn riccati_map(a: &DMatrix<f64>, c: &DMatrix<f64>, q: &SymMatrix, w: &SymMatrix, x: &SymMatrix) -> Result<SymMatrix> {
    let xc = x.as_matrix() * c.transpose();
    let innov = c * &xc + w.as_matrix();
    let chol = Cholesky::new(innov).ok_or(Error::SingularInnovation)?;
    let gain_rhs = chol.solve(&xc.transpose());
    let posterior = x.as_matrix() - &xc * gain_rhs;
    Ok(SymMatrix::from_symmetrized(a * posterior * a.transpose() + q.as_matrix()))
}

/// Fixed point of [`riccati_map`], iterated from `X₀ = 0`.
///
/// The iterates are nondecreasing in the Loewner order; the loop stops once
/// `‖X − g_W(X)‖ ≤ fixed_point_tol · ‖X‖`.
pub fn riccati_fixed_point(a: &DMatrix<f64>, c: &DMatrix<f64>, q: &SymMatrix, w: &SymMatrix, tol: &Tolerances) -> Result<SymMatrix> {
    check_square(a)?;
    let n = a.nrows();
    if q.dim() != n || c.ncols() != n || c.nrows() != w.dim() {
        return Err(Error::DimensionMismatch(format!(
            "riccati: A {}x{}, C {}x{}, Q {}, W {}",
            n,
            n,
            c.nrows(),
            c.ncols(),
            q.dim(),
            w.dim()
        )));
    }
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::Unstable { spectral_radius: rho });
    }
    let mut x = SymMatrix::zeros(n);
    let mut residual = f64::INFINITY;
    for _ in 0..tol.max_iters {
        let next = riccati_map(a, c, q, w, &x)?;
        residual = rel_diff(&next, &x);
        x = next;
        if residual <= tol.fixed_point_tol {
            return Ok(x);
        }
    }
    Err(Error::NotConverged { iterations: tol.max_iters, residual })
}

/// Block-diagonal assembly of square blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
        off += b.nrows();
    }
    out
}
