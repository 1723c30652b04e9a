//! Brute-force conditional densities on a lattice, for systems with at most
//! two states. Used as ground truth for the event-triggered filter.
//!
//! The lattice lives in coordinates whitened by the process noise,
//! `x = Lξ` with `LLᵀ = Q`, so the time update is a linear pull-back followed
//! by a separable convolution with a unit Gaussian.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{time_update, EstimatorState, EventFilter, TransmissionRecord};
use crate::model::SystemModel;
use crate::numerics::SymMatrix;
use crate::rng;
use crate::trigger::{DecisionVector, TriggerDesign};

/// Mass allowed to leave the lattice in one time update.
const OVERFLOW_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Lattice points per axis; rounded up to an odd count so the origin is a node.
    pub points: usize,
    /// Half-width of each axis in stationary standard deviations.
    pub half_width: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { points: 2001, half_width: 8.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPosterior {
    /// `x = L ξ`.
    l: DMatrix<f64>,
    l_inv: DMatrix<f64>,
    start: Vec<f64>,
    step: Vec<f64>,
    len: Vec<usize>,
    /// Density in `ξ` coordinates, row-major with the last axis fastest.
    weights: Vec<f64>,
}

/// Log of a Gaussian-shaped factor `−½ ξᵀHξ + bᵀξ` in lattice coordinates.
struct QuadraticLog {
    h: DMatrix<f64>,
    b: DVector<f64>,
}

impl GridPosterior {
    /// `N(0, Σ₀)` on a lattice covering `±half_width` standard deviations of
    /// both the stationary covariance and `Σ₀`.
    pub fn initial(model: &SystemModel, spec: &GridSpec) -> Result<Self> {
        let n = model.state_dim();
        if n == 0 || n > 2 {
            return Err(Error::Oracle(format!("lattice oracle supports 1 or 2 states, got {n}")));
        }
        if spec.points < 5 || spec.half_width <= 0.0 {
            return Err(Error::Oracle("grid needs at least 5 points and a positive half-width".into()));
        }
        let l = model.q().cholesky().ok_or_else(|| Error::NotPositiveDefinite { what: "Q".into() })?.l();
        let l_inv = l.clone().try_inverse().ok_or_else(|| Error::NotPositiveDefinite { what: "Q".into() })?;
        let whiten = |m: &SymMatrix| &l_inv * m.as_matrix() * l_inv.transpose();
        let s_stat = whiten(&model.stationary_stats()?.sigma);
        let s0 = whiten(model.sigma0());
        let points = spec.points | 1;
        let mut start = Vec::with_capacity(n);
        let mut step = Vec::with_capacity(n);
        for j in 0..n {
            let sd = s_stat[(j, j)].max(s0[(j, j)]).sqrt();
            start.push(-spec.half_width * sd);
            step.push(2.0 * spec.half_width * sd / (points - 1) as f64);
        }
        let mut g = Self { l, l_inv, start, step, len: vec![points; n], weights: Vec::new() };
        let s0_inv = SymMatrix::from_symmetrized(s0).inverse_pd("Sigma0")?;
        g.weights = vec![1.0; g.size()];
        g.multiply_quadratic(&QuadraticLog { h: s0_inv.into_inner(), b: DVector::zeros(n) })?;
        Ok(g)
    }

    /// `N(mean, cov)` on the same lattice `initial` would build.
    pub fn gaussian(model: &SystemModel, spec: &GridSpec, mean: &DVector<f64>, cov: &SymMatrix) -> Result<Self> {
        let mut g = Self::initial(model, spec)?;
        if mean.len() != g.dim() || cov.dim() != g.dim() {
            return Err(Error::DimensionMismatch("Gaussian and lattice dimensions differ".into()));
        }
        let prec = cov.inverse_pd("covariance")?;
        g.weights = vec![1.0; g.size()];
        let f = g.quadratic_from_state(&DMatrix::identity(g.dim(), g.dim()), prec.as_matrix(), mean);
        g.multiply_quadratic(&f)?;
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.len.len()
    }

    fn size(&self) -> usize {
        self.len.iter().product()
    }

    fn cell_volume(&self) -> f64 {
        self.step.iter().product()
    }

    pub fn axis_points(&self) -> &[usize] {
        &self.len
    }

    /// `ξ` at a flat index.
    fn xi(&self, flat: usize) -> [f64; 2] {
        match self.dim() {
            1 => [self.start[0] + flat as f64 * self.step[0], 0.0],
            _ => {
                let (i, j) = (flat / self.len[1], flat % self.len[1]);
                [self.start[0] + i as f64 * self.step[0], self.start[1] + j as f64 * self.step[1]]
            }
        }
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum::<f64>() * self.cell_volume()
    }

    fn normalize(&mut self) -> Result<()> {
        for w in &mut self.weights {
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        let mass = self.mass();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::Oracle("posterior mass vanished on the lattice".into()));
        }
        let k = 1.0 / mass;
        self.weights.iter_mut().for_each(|w| *w *= k);
        Ok(())
    }

    /// Multiplies by `exp(−½ ξᵀHξ + bᵀξ)` with the maximum factored out, then
    /// renormalizes.
    fn multiply_quadratic(&mut self, f: &QuadraticLog) -> Result<()> {
        let n = self.dim();
        let eval = |xi: [f64; 2]| {
            let mut v = 0.0;
            for a in 0..n {
                v += f.b[a] * xi[a];
                for c in 0..n {
                    v -= 0.5 * xi[a] * f.h[(a, c)] * xi[c];
                }
            }
            v
        };
        let logs: Vec<f64> = (0..self.size()).map(|k| eval(self.xi(k))).collect();
        let peak = logs.iter().zip(&self.weights).filter(|(_, &w)| w > 0.0).map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
        if !peak.is_finite() {
            return Err(Error::Oracle("posterior mass vanished on the lattice".into()));
        }
        for (w, l) in self.weights.iter_mut().zip(&logs) {
            *w *= (l - peak).exp();
        }
        self.normalize()
    }

    /// Converts `−½ (Mx − v)ᵀK(Mx − v)` in state coordinates to lattice coordinates.
    fn quadratic_from_state(&self, m: &DMatrix<f64>, k: &DMatrix<f64>, v: &DVector<f64>) -> QuadraticLog {
        let ml = m * &self.l;
        QuadraticLog { h: ml.transpose() * k * &ml, b: ml.transpose() * k * v }
    }

    /// Density of `Ax + w`, `w ~ N(0, Q)`.
    pub fn propagate(&self, model: &SystemModel) -> Result<Self> {
        if model.state_dim() != self.dim() {
            return Err(Error::DimensionMismatch("model and lattice dimensions differ".into()));
        }
        let a_w = &self.l_inv * model.a() * &self.l;
        let mut out = self.clone();
        if model.a().iter().all(|&v| v == 0.0) {
            // Ax is the origin, so the result is N(0, Q) exactly
            out.weights = vec![1.0; self.size()];
            let n = self.dim();
            out.multiply_quadratic(&QuadraticLog { h: DMatrix::identity(n, n), b: DVector::zeros(n) })?;
            return Ok(out);
        }
        let a_inv =
            a_w.clone().try_inverse().ok_or_else(|| Error::Oracle("lattice time update needs an invertible A (or A = 0)".into()))?;
        let det = a_w.determinant().abs();
        out.pull_back(self, &a_inv, det);
        let before = out.mass();
        out.convolve_unit_gaussian();
        let after = out.mass();
        let lost = (1.0 - after / before).max(0.0) + (1.0 - before).max(0.0);
        if lost > OVERFLOW_TOL {
            return Err(Error::Oracle(format!("lattice overflow: {lost:.3e} of the mass left the grid")));
        }
        out.normalize()?;
        Ok(out)
    }

    /// `q(ξ) = p(Ã⁻¹ξ) / |det Ã|` by Keys cubic interpolation, zero off the grid.
    fn pull_back(&mut self, src: &GridPosterior, a_inv: &DMatrix<f64>, det: f64) {
        let n = self.dim();
        let scale = 1.0 / det;
        for k in 0..self.size() {
            let xi = self.xi(k);
            let mut u = [0.0; 2];
            for a in 0..n {
                let s: f64 = (0..n).map(|c| a_inv[(a, c)] * xi[c]).sum();
                u[a] = (s - src.start[a]) / src.step[a];
            }
            self.weights[k] = scale * src.interpolate(&u[..n]);
        }
    }

    fn interpolate(&self, u: &[f64]) -> f64 {
        let taps = |x: f64, len: usize| -> Option<(isize, [f64; 4])> {
            if x < -1.0 || x > len as f64 {
                return None;
            }
            let base = x.floor();
            let t = x - base;
            Some((base as isize - 1, keys_weights(t)))
        };
        match u.len() {
            1 => {
                let Some((i0, w)) = taps(u[0], self.len[0]) else { return 0.0 };
                (0..4).map(|a| w[a] * self.sample(&[i0 + a as isize])).sum()
            }
            _ => {
                let Some((i0, w0)) = taps(u[0], self.len[0]) else { return 0.0 };
                let Some((j0, w1)) = taps(u[1], self.len[1]) else { return 0.0 };
                let mut v = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        v += w0[a] * w1[b] * self.sample(&[i0 + a as isize, j0 + b as isize]);
                    }
                }
                v
            }
        }
    }

    fn sample(&self, idx: &[isize]) -> f64 {
        let mut flat = 0usize;
        for (a, &i) in idx.iter().enumerate() {
            if i < 0 || i as usize >= self.len[a] {
                return 0.0;
            }
            flat = flat * self.len[a] + i as usize;
        }
        self.weights[flat]
    }

    fn convolve_unit_gaussian(&mut self) {
        let mut planner = FftPlanner::new();
        match self.dim() {
            1 => {
                let conv = AxisConvolver::new(self.len[0], self.step[0], &mut planner);
                conv.apply(&mut self.weights);
            }
            _ => {
                let (n0, n1) = (self.len[0], self.len[1]);
                let conv1 = AxisConvolver::new(n1, self.step[1], &mut planner);
                for row in self.weights.chunks_mut(n1) {
                    conv1.apply(row);
                }
                let conv0 = AxisConvolver::new(n0, self.step[0], &mut planner);
                let mut col = vec![0.0; n0];
                for j in 0..n1 {
                    for i in 0..n0 {
                        col[i] = self.weights[i * n1 + j];
                    }
                    conv0.apply(&mut col);
                    for i in 0..n0 {
                        self.weights[i * n1 + j] = col[i];
                    }
                }
            }
        }
    }

    /// Conditions on sensor `i` reporting `value`, with likelihood
    /// `N(value; C⁽ⁱ⁾x, R⁽ⁱ⁾)`.
    pub fn condition_on_transmit(&self, model: &SystemModel, i: usize, value: &DVector<f64>) -> Result<Self> {
        if value.len() != model.sensor_dim(i) {
            return Err(Error::DimensionMismatch(format!("sensor {i} has {} outputs, got {}", model.sensor_dim(i), value.len())));
        }
        let r_inv = model.r_block(i).inverse_pd("R block")?;
        let f = self.quadratic_from_state(model.sensor_block(i), r_inv.as_matrix(), value);
        let mut out = self.clone();
        out.multiply_quadratic(&f)?;
        Ok(out)
    }

    /// Conditions on sensor `i` staying silent, with likelihood `L₀(x)` from
    /// [`drop_likelihood`].
    pub fn condition_on_drop(&self, model: &SystemModel, design: &TriggerDesign, i: usize) -> Result<Self> {
        let k = drop_precision(model, design, i)?;
        let f = self.quadratic_from_state(model.sensor_block(i), &k, &DVector::zeros(model.sensor_dim(i)));
        let mut out = self.clone();
        out.multiply_quadratic(&f)?;
        Ok(out)
    }

    /// Mean and covariance in state coordinates.
    pub fn moments(&self) -> (DVector<f64>, SymMatrix) {
        let n = self.dim();
        let vol = self.cell_volume();
        let mut mean = [0.0; 2];
        for (k, w) in self.weights.iter().enumerate() {
            let xi = self.xi(k);
            for a in 0..n {
                mean[a] += w * xi[a];
            }
        }
        mean.iter_mut().for_each(|m| *m *= vol);
        let mut cov = DMatrix::zeros(n, n);
        for (k, w) in self.weights.iter().enumerate() {
            let xi = self.xi(k);
            for a in 0..n {
                for c in 0..n {
                    cov[(a, c)] += w * (xi[a] - mean[a]) * (xi[c] - mean[c]);
                }
            }
        }
        cov *= vol;
        let mean_x = &self.l * DVector::from_column_slice(&mean[..n]);
        (mean_x, SymMatrix::from_symmetrized(&self.l * cov * self.l.transpose()))
    }

    /// Excess kurtosis of each state coordinate.
    pub fn excess_kurtosis(&self) -> Vec<f64> {
        let n = self.dim();
        let (mean, _) = self.moments();
        let vol = self.cell_volume();
        (0..n)
            .map(|a| {
                let (mut m2, mut m4) = (0.0, 0.0);
                for (k, w) in self.weights.iter().enumerate() {
                    let xi = self.xi(k);
                    let x: f64 = (0..n).map(|c| self.l[(a, c)] * xi[c]).sum::<f64>() - mean[a];
                    let x2 = x * x;
                    m2 += w * x2;
                    m4 += w * x2 * x2;
                }
                (m4 * vol) / (m2 * vol).powi(2) - 3.0
            })
            .collect()
    }
}

/// Keys cubic convolution weights (`a = −1/2`) for taps at offsets −1, 0, 1, 2.
fn keys_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [-0.5 * t3 + t2 - 0.5 * t, 1.5 * t3 - 2.5 * t2 + 1.0, -1.5 * t3 + 2.0 * t2 + 0.5 * t, 0.5 * t3 - 0.5 * t2]
}

/// Linear convolution of a length-`n` axis with a sampled unit Gaussian.
struct AxisConvolver {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    kernel_hat: Vec<Complex<f64>>,
}

impl AxisConvolver {
    fn new(n: usize, h: f64, planner: &mut FftPlanner<f64>) -> Self {
        let reach = ((10.0 / h).ceil() as usize).min(n - 1);
        let nfft = (n + reach).next_power_of_two();
        let mut kernel = vec![Complex::new(0.0, 0.0); nfft];
        let norm = h / (2.0 * std::f64::consts::PI).sqrt();
        for j in 0..=reach {
            let v = norm * (-0.5 * (j as f64 * h).powi(2)).exp();
            kernel[j].re = v;
            if j > 0 {
                kernel[nfft - j].re = v;
            }
        }
        let fwd = planner.plan_fft_forward(nfft);
        let inv = planner.plan_fft_inverse(nfft);
        fwd.process(&mut kernel);
        let scale = 1.0 / nfft as f64;
        kernel.iter_mut().for_each(|c| *c *= scale);
        Self { n, fwd, inv, kernel_hat: kernel }
    }

    fn apply(&self, data: &mut [f64]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.kernel_hat.len()];
        for (b, &d) in buf.iter_mut().zip(data.iter()) {
            b.re = d;
        }
        self.fwd.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel_hat) {
            *b *= k;
        }
        self.inv.process(&mut buf);
        for (d, b) in data.iter_mut().zip(&buf[..self.n]) {
            *d = b.re;
        }
    }
}

/// `Y(I + RY)⁻¹ = (Y⁻¹ + R)⁻¹`, well defined for singular `Y`.
fn drop_precision(model: &SystemModel, design: &TriggerDesign, i: usize) -> Result<DMatrix<f64>> {
    if design.sensor_dims() != model.sensor_dims() {
        return Err(Error::DimensionMismatch("trigger blocks do not match sensor dimensions".into()));
    }
    let y = design.block(i).as_matrix();
    let r = model.r_block(i);
    let d = y.nrows();
    let m = DMatrix::identity(d, d) + r.as_matrix() * y;
    let m_inv = m.try_inverse().ok_or(Error::SingularInnovation)?;
    Ok(SymMatrix::from_symmetrized(y * m_inv).into_inner())
}

/// `L₀(x) = P(γ⁽ⁱ⁾ = 0 | x) = det(I + R⁽ⁱ⁾Y⁽ⁱ⁾)^{−1/2} exp(−½ (C⁽ⁱ⁾x)ᵀ(Y⁽ⁱ⁾⁻¹ + R⁽ⁱ⁾)⁻¹ C⁽ⁱ⁾x)`.
pub fn drop_likelihood(model: &SystemModel, design: &TriggerDesign, i: usize, x: &DVector<f64>) -> Result<f64> {
    let k = drop_precision(model, design, i)?;
    let y = design.block(i).as_matrix();
    let d = y.nrows();
    let det = (DMatrix::identity(d, d) + model.r_block(i).as_matrix() * y).determinant();
    let cx = model.sensor_block(i) * x;
    Ok(det.powf(-0.5) * (-0.5 * cx.dot(&(&k * &cx))).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub patterns: usize,
    /// Number of (mean, covariance) pairs compared.
    pub comparisons: usize,
    /// `max ‖μ_grid − x̂‖ / √tr P`.
    pub max_mean_rel_err: f64,
    /// `max ‖P_grid − P‖ / ‖P‖` (spectral norm).
    pub max_cov_rel_err: f64,
    pub max_abs_excess_kurtosis: f64,
}

impl EquivalenceReport {
    pub fn passes(&self, rel_tol: f64, kurtosis_tol: f64) -> bool {
        self.max_mean_rel_err <= rel_tol && self.max_cov_rel_err <= rel_tol && self.max_abs_excess_kurtosis <= kurtosis_tol
    }
}

struct Walk<'a> {
    model: &'a SystemModel,
    design: &'a TriggerDesign,
    filter: EventFilter<'a>,
    steps: usize,
    values: Vec<Vec<DVector<f64>>>,
    report: EquivalenceReport,
}

impl Walk<'_> {
    fn compare(&mut self, grid: &GridPosterior, mean: &DVector<f64>, cov: &SymMatrix) {
        let (gm, gc) = grid.moments();
        let r = &mut self.report;
        r.comparisons += 1;
        r.max_mean_rel_err = r.max_mean_rel_err.max((gm - mean).norm() / cov.trace().sqrt());
        r.max_cov_rel_err = r.max_cov_rel_err.max(gc.sub(cov).norm() / cov.norm());
        for k in grid.excess_kurtosis() {
            r.max_abs_excess_kurtosis = r.max_abs_excess_kurtosis.max(k.abs());
        }
    }

    fn visit(&mut self, k: usize, grid: &GridPosterior, state: &EstimatorState) -> Result<()> {
        let m = self.model.num_sensors();
        for bits in 0..(1u64 << m) {
            let decision = DecisionVector::from_bits(bits, m);
            let mut g = grid.clone();
            let mut received = Vec::new();
            for i in 0..m {
                g = if decision.gamma[i] {
                    received.extend(self.values[k][i].iter().copied());
                    g.condition_on_transmit(self.model, i, &self.values[k][i])?
                } else {
                    g.condition_on_drop(self.model, self.design, i)?
                };
            }
            let record = TransmissionRecord { decision, values: DVector::from_vec(received) };
            let post = self.filter.update(state, &record)?;
            self.compare(&g, &post.x_post, &post.p_post);
            if k + 1 < self.steps {
                let prior = time_update(&post, self.model);
                let g_next = g.propagate(self.model)?;
                self.compare(&g_next, &prior.x_prior, &prior.p_prior);
                self.visit(k + 1, &g_next, &prior)?;
            } else {
                self.report.patterns += 1;
            }
        }
        Ok(())
    }
}

/// Runs the filter and the lattice oracle side by side over every decision
/// pattern of length `steps`, starting from `N(0, Σ₀)`. Transmitted values are
/// fixed per (step, sensor), drawn from `N(0, Π⁽ⁱ⁾)` under `seed`.
///
/// Requires block-diagonal `R`: the oracle conditions sensor by sensor.
pub fn filter_equivalence(
    model: &SystemModel,
    design: &TriggerDesign,
    steps: usize,
    spec: &GridSpec,
    seed: u64,
) -> Result<EquivalenceReport> {
    let m = model.num_sensors();
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let blk = model.r().view((model.sensor_offset(i), model.sensor_offset(j)), (model.sensor_dim(i), model.sensor_dim(j)));
                if blk.iter().any(|&v| v != 0.0) {
                    return Err(Error::Oracle("lattice oracle needs block-diagonal R".into()));
                }
            }
        }
    }
    let stats = model.stationary_stats()?;
    let values = (0..steps)
        .map(|k| {
            (0..m)
                .map(|i| {
                    let mut s = rng::derive(seed, &[rng::domain::ORACLE, k as u64, i as u64]);
                    let chol = stats.pi_blocks[i].cholesky().expect("Pi is positive definite").l();
                    let z = DVector::from_fn(model.sensor_dim(i), |_, _| s.sample::<f64, _>(StandardNormal));
                    chol * z
                })
                .collect()
        })
        .collect();
    let grid = GridPosterior::initial(model, spec)?;
    let state = EstimatorState::initial(model);
    let mut walk = Walk {
        model,
        design,
        filter: EventFilter::new(model, design)?,
        steps,
        values,
        report: EquivalenceReport {
            patterns: 0,
            comparisons: 0,
            max_mean_rel_err: 0.0,
            max_cov_rel_err: 0.0,
            max_abs_excess_kurtosis: 0.0,
        },
    };
    walk.compare(&grid, &state.x_prior, &state.p_prior);
    walk.visit(0, &grid, &state)?;
    Ok(walk.report)
}
