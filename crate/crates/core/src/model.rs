//! The linear plant `x_{k+1} = A x_k + w_k`, `y_k = C x_k + v_k` observed by
//! `m` (possibly vector-valued) sensors, and its stationary statistics.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{self, SymMatrix};

/// Raw plant matrices, before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrices {
    pub a: DMatrix<f64>,
    /// One `s_i × n` block per sensor, in sensor order.
    pub sensor_blocks: Vec<DMatrix<f64>>,
    pub q: DMatrix<f64>,
    /// Full `s × s` measurement noise covariance; off-diagonal blocks carry
    /// cross-sensor correlation.
    pub r: DMatrix<f64>,
    pub sigma0: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ValidationCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, name: &'static str, passed: bool, detail: impl Into<String>) {
        self.checks.push(ValidationCheck { name, passed, detail: detail.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

fn positive_definite(m: &DMatrix<f64>) -> (bool, f64) {
    let s = SymMatrix::from_symmetrized(m.clone());
    let ev = s.eigenvalues();
    let norm = ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    (ev[0] > 1e-12 * norm && s.cholesky().is_some(), ev[0])
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0)
}

impl ModelMatrices {
    /// Checks every plant invariant and names each violation individually.
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        let n = self.a.nrows();

        let mut dims_ok = self.a.is_square() && n > 0;
        let mut dim_detail = Vec::new();
        if !dims_ok {
            dim_detail.push(format!("A is {}x{}, must be square and non-empty", self.a.nrows(), self.a.ncols()));
        }
        if self.sensor_blocks.is_empty() {
            dims_ok = false;
            dim_detail.push("no sensors".to_string());
        }
        for (i, c) in self.sensor_blocks.iter().enumerate() {
            if c.ncols() != n || c.nrows() == 0 {
                dims_ok = false;
                dim_detail.push(format!("sensor {} block is {}x{}, expected s_i x {}", i, c.nrows(), c.ncols(), n));
            }
        }
        let s: usize = self.sensor_blocks.iter().map(|c| c.nrows()).sum();
        if self.q.shape() != (n, n) {
            dims_ok = false;
            dim_detail.push(format!("Q is {}x{}, expected {}x{}", self.q.nrows(), self.q.ncols(), n, n));
        }
        if self.sigma0.shape() != (n, n) {
            dims_ok = false;
            dim_detail.push(format!("Sigma0 is {}x{}, expected {}x{}", self.sigma0.nrows(), self.sigma0.ncols(), n, n));
        }
        if self.r.shape() != (s, s) {
            dims_ok = false;
            dim_detail.push(format!("R is {}x{}, expected {}x{} (stacked sensor dim)", self.r.nrows(), self.r.ncols(), s, s));
        }
        report.push(
            "dimensions consistent",
            dims_ok,
            if dims_ok { format!("n = {n}, m = {}, s = {s}", self.sensor_blocks.len()) } else { dim_detail.join("; ") },
        );
        if !dims_ok {
            return report;
        }

        for (name, m) in [("Q symmetric", &self.q), ("R symmetric", &self.r), ("Sigma0 symmetric", &self.sigma0)] {
            let ok = is_symmetric(m);
            report.push(name, ok, if ok { "ok".to_string() } else { format!("{} not symmetric", &name[..name.len() - 10]) });
        }

        match numerics::spectral_radius(&self.a) {
            Ok(rho) if rho < 1.0 => report.push("spectral radius < 1", true, format!("rho(A) = {rho:.6}")),
            Ok(rho) => report.push("spectral radius < 1", false, format!("spectral radius ≥ 1 (rho(A) = {rho:.6})")),
            Err(e) => report.push("spectral radius < 1", false, e.to_string()),
        }

        for (name, label, m) in [
            ("Q positive definite", "Q", &self.q),
            ("R positive definite", "R", &self.r),
            ("Sigma0 positive definite", "Sigma0", &self.sigma0),
        ] {
            let (ok, min_ev) = positive_definite(m);
            let detail = if ok {
                format!("min eigenvalue {min_ev:.3e}")
            } else {
                format!("{label} not positive definite (min eigenvalue {min_ev:.3e})")
            };
            report.push(name, ok, detail);
        }

        let stable = report.checks.iter().any(|c| c.name == "spectral radius < 1" && c.passed);
        report.push("(A, C) detectable", stable, if stable { "implied by spectral radius < 1" } else { "not established (A unstable)" });
        report
    }
}

/// A validated plant. Immutable; Cholesky factors of the noise covariances
/// are computed once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    a: DMatrix<f64>,
    sensor_blocks: Vec<DMatrix<f64>>,
    c: DMatrix<f64>,
    q: SymMatrix,
    r: SymMatrix,
    sigma0: SymMatrix,
    offsets: Vec<usize>,
    q_chol: DMatrix<f64>,
    r_chol: DMatrix<f64>,
    sigma0_chol: DMatrix<f64>,
}

impl SystemModel {
    pub fn new(matrices: ModelMatrices) -> Result<Self> {
        let report = matrices.validate();
        if !report.is_valid() {
            return Err(Error::InvalidModel(report));
        }
        let ModelMatrices { a, sensor_blocks, q, r, sigma0 } = matrices;
        let n = a.nrows();
        let s: usize = sensor_blocks.iter().map(|b| b.nrows()).sum();
        let mut c = DMatrix::zeros(s, n);
        let mut offsets = Vec::with_capacity(sensor_blocks.len() + 1);
        let mut off = 0;
        for b in &sensor_blocks {
            offsets.push(off);
            c.view_mut((off, 0), (b.nrows(), n)).copy_from(b);
            off += b.nrows();
        }
        offsets.push(off);
        let q = SymMatrix::from_symmetrized(q);
        let r = SymMatrix::from_symmetrized(r);
        let sigma0 = SymMatrix::from_symmetrized(sigma0);
        let chol = |m: &SymMatrix, what: &str| m.cholesky().map(|c| c.l()).ok_or_else(|| Error::NotPositiveDefinite { what: what.into() });
        Ok(Self {
            q_chol: chol(&q, "Q")?,
            r_chol: chol(&r, "R")?,
            sigma0_chol: chol(&sigma0, "Sigma0")?,
            a,
            sensor_blocks,
            c,
            q,
            r,
            sigma0,
            offsets,
        })
    }

    /// Scalar plant `x' = a x + w`, `y = c x + v` with one sensor.
    pub fn scalar(a: f64, c: f64, q: f64, r: f64, sigma0: f64) -> Result<Self> {
        Self::new(ModelMatrices {
            a: DMatrix::from_element(1, 1, a),
            sensor_blocks: vec![DMatrix::from_element(1, 1, c)],
            q: DMatrix::from_element(1, 1, q),
            r: DMatrix::from_element(1, 1, r),
            sigma0: DMatrix::from_element(1, 1, sigma0),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_sensors(&self) -> usize {
        self.sensor_blocks.len()
    }

    /// Total stacked measurement dimension `s`.
    pub fn meas_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn sensor_dim(&self, i: usize) -> usize {
        self.sensor_blocks[i].nrows()
    }

    pub fn sensor_dims(&self) -> Vec<usize> {
        self.sensor_blocks.iter().map(|b| b.nrows()).collect()
    }

    /// Row offset of sensor `i` inside the stacked measurement.
    pub fn sensor_offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn sensor_block(&self, i: usize) -> &DMatrix<f64> {
        &self.sensor_blocks[i]
    }

    pub fn sensor_blocks(&self) -> &[DMatrix<f64>] {
        &self.sensor_blocks
    }

    pub fn q(&self) -> &SymMatrix {
        &self.q
    }

    pub fn r(&self) -> &SymMatrix {
        &self.r
    }

    pub fn sigma0(&self) -> &SymMatrix {
        &self.sigma0
    }

    /// The i-th diagonal block `R⁽ⁱ⁾` of `R`.
    pub fn r_block(&self, i: usize) -> SymMatrix {
        let off = self.offsets[i];
        let si = self.sensor_dim(i);
        SymMatrix::from_symmetrized(self.r.view((off, off), (si, si)).into_owned())
    }

    pub fn matrices(&self) -> ModelMatrices {
        ModelMatrices {
            a: self.a.clone(),
            sensor_blocks: self.sensor_blocks.clone(),
            q: self.q.as_matrix().clone(),
            r: self.r.as_matrix().clone(),
            sigma0: self.sigma0.as_matrix().clone(),
        }
    }

    /// Sub-vector of a stacked measurement belonging to sensor `i`.
    pub fn sensor_slice<'a>(&self, y: &'a DVector<f64>, i: usize) -> nalgebra::DVectorView<'a, f64> {
        y.rows(self.offsets[i], self.sensor_dim(i))
    }

    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        gaussian(&self.sigma0_chol, rng)
    }

    pub fn sample_process_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        gaussian(&self.q_chol, rng)
    }

    pub fn sample_measurement_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        gaussian(&self.r_chol, rng)
    }

    /// Stationary covariance `Σ` and per-sensor measurement covariances `Π⁽ⁱ⁾`.
    pub fn stationary_stats(&self) -> Result<StationaryStats> {
        let sigma = numerics::solve_lyapunov(&self.a, &self.q)?;
        let pi_blocks = (0..self.num_sensors()).map(|i| sigma.congruence(&self.sensor_blocks[i]).add(&self.r_block(i))).collect();
        Ok(StationaryStats { sigma, pi_blocks })
    }
}

/// `L z` for `z ~ N(0, I)`.
fn gaussian<R: Rng + ?Sized>(chol_l: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = DVector::from_fn(chol_l.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    chol_l * z
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryStats {
    pub sigma: SymMatrix,
    pub pi_blocks: Vec<SymMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantTrajectory {
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
}

/// Simulates `horizon` steps: `x₀ ~ N(0, Σ₀)`, then at each step draws
/// `v_k ~ N(0, R)` and `w_k ~ N(0, Q)` from `rng`, in that order.
pub fn simulate_plant<R: Rng + ?Sized>(model: &SystemModel, horizon: usize, rng: &mut R) -> PlantTrajectory {
    let mut states = Vec::with_capacity(horizon);
    let mut measurements = Vec::with_capacity(horizon);
    let mut x = model.sample_initial_state(rng);
    for _ in 0..horizon {
        let y = &model.c * &x + model.sample_measurement_noise(rng);
        let next = &model.a * &x + model.sample_process_noise(rng);
        states.push(std::mem::replace(&mut x, next));
        measurements.push(y);
    }
    PlantTrajectory { states, measurements }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn identity_model(n: usize) -> ModelMatrices {
        ModelMatrices {
            a: DMatrix::identity(n, n) * 0.5,
            sensor_blocks: vec![DMatrix::identity(n, n)],
            q: DMatrix::identity(n, n),
            r: DMatrix::identity(n, n),
            sigma0: DMatrix::identity(n, n),
        }
    }

    #[test]
    fn validate_examples() {
        assert!(identity_model(2).validate().is_valid());

        let unstable = ModelMatrices {
            a: dmatrix![1.1],
            sensor_blocks: vec![dmatrix![1.0]],
            q: dmatrix![1.0],
            r: dmatrix![1.0],
            sigma0: dmatrix![1.0],
        };
        let report = unstable.validate();
        assert!(!report.is_valid());
        let fail: Vec<_> = report.failures().collect();
        assert!(fail.iter().any(|c| c.detail.contains("spectral radius ≥ 1")));

        let mut singular_r = identity_model(2);
        singular_r.r = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        let report = singular_r.validate();
        assert_eq!(report.failures().count(), 1);
        assert!(report.failures().next().unwrap().detail.contains("R not positive definite"));
        assert!(matches!(SystemModel::new(singular_r), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn validate_reports_dimension_errors() {
        let mut m = identity_model(2);
        m.r = DMatrix::identity(3, 3);
        let report = m.validate();
        assert!(!report.is_valid());
        assert!(report.checks[0].detail.contains("R is 3x3"));
    }

    #[test]
    fn stationary_stats_examples() {
        let model = SystemModel::scalar(0.5, 1.0, 1.0, 1.0, 1.0).unwrap();
        let st = model.stationary_stats().unwrap();
        assert!((st.sigma[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
        assert!((st.pi_blocks[0][(0, 0)] - 7.0 / 3.0).abs() < 1e-12);

        let mut m = identity_model(2);
        m.a = DMatrix::zeros(2, 2);
        let st = SystemModel::new(m).unwrap().stationary_stats().unwrap();
        assert!((st.sigma.as_matrix() - DMatrix::<f64>::identity(2, 2)).amax() < 1e-14);
        assert!((st.pi_blocks[0].as_matrix() - DMatrix::<f64>::identity(2, 2) * 2.0).amax() < 1e-14);
    }

    #[test]
    fn correlated_r_uses_diagonal_blocks_only() {
        let m = ModelMatrices {
            a: dmatrix![0.5],
            sensor_blocks: vec![dmatrix![1.0], dmatrix![2.0]],
            q: dmatrix![1.0],
            r: dmatrix![1.0, 0.6; 0.6, 2.0],
            sigma0: dmatrix![1.0],
        };
        let st = SystemModel::new(m).unwrap().stationary_stats().unwrap();
        assert!((st.pi_blocks[0][(0, 0)] - (4.0 / 3.0 + 1.0)).abs() < 1e-12);
        assert!((st.pi_blocks[1][(0, 0)] - (4.0 * 4.0 / 3.0 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn simulate_is_deterministic() {
        let model = SystemModel::new(identity_model(2)).unwrap();
        let a = simulate_plant(&model, 50, &mut ChaCha20Rng::seed_from_u64(9));
        let b = simulate_plant(&model, 50, &mut ChaCha20Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn simulated_scalar_variance_matches_stationary() {
        let model = SystemModel::scalar(0.5, 1.0, 1.0, 1.0, 4.0 / 3.0).unwrap();
        let traj = simulate_plant(&model, 100_000, &mut ChaCha20Rng::seed_from_u64(1));
        let var = traj.states.iter().map(|x| x[0] * x[0]).sum::<f64>() / traj.states.len() as f64;
        assert!((var / (4.0 / 3.0) - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn simulated_two_state_covariance_matches_stationary() {
        let m = ModelMatrices {
            a: dmatrix![0.6, 0.2; -0.1, 0.4],
            sensor_blocks: vec![dmatrix![1.0, 0.0]],
            q: dmatrix![1.0, 0.3; 0.3, 0.5],
            r: dmatrix![1.0],
            sigma0: dmatrix![1.0, 0.0; 0.0, 1.0],
        };
        let model = SystemModel::new(m).unwrap();
        let sigma = model.stationary_stats().unwrap().sigma;
        let traj = simulate_plant(&model, 100_000, &mut ChaCha20Rng::seed_from_u64(2));
        let mut cov = DMatrix::zeros(2, 2);
        for x in &traj.states[100..] {
            cov += x * x.transpose();
        }
        cov /= (traj.states.len() - 100) as f64;
        // off-diagonal entries are compared on the correlation scale
        for i in 0..2 {
            for j in 0..2 {
                let scale = (sigma[(i, i)] * sigma[(j, j)]).sqrt();
                assert!((cov[(i, j)] - sigma[(i, j)]).abs() <= 0.05 * scale, "{cov} vs {}", sigma.as_matrix());
            }
        }
    }

    #[test]
    fn white_process_has_no_lag_correlation() {
        let mut m = identity_model(1);
        m.a = dmatrix![0.0];
        let model = SystemModel::new(m).unwrap();
        let traj = simulate_plant(&model, 100_000, &mut ChaCha20Rng::seed_from_u64(3));
        let xs: Vec<f64> = traj.states.iter().map(|x| x[0]).collect();
        let var = xs.iter().map(|v| v * v).sum::<f64>() / xs.len() as f64;
        let lag = xs.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((lag / var).abs() < 0.02);
    }
}
