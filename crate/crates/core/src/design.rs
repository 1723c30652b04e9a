//! Trigger-parameter design. Minimizes `Σᵢ tr(Π⁽ⁱ⁾Y⁽ⁱ⁾)` subject to the
//! worst-case posterior bound `P̄ ⪯ Δ`, written as the linear matrix inequality
//!
//! ```text
//! ⎡ Q⁻¹ − S + CᵀR⁻¹C   Q⁻¹A         CᵀR⁻¹   ⎤
//! ⎢ AᵀQ⁻¹              AᵀQ⁻¹A + S   0       ⎥ ⪰ 0,   S ⪰ Δ⁻¹,   Y⁽ⁱ⁾ ⪰ 0.
//! ⎣ R⁻¹C               0            Y + R⁻¹ ⎦
//! ```

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, BoundSet};
use crate::error::{Error, Result};
use crate::model::SystemModel;
use crate::numerics::{self, SymMatrix, Tolerances};
use crate::sdp::{BarrierConfig, BarrierProblem, BarrierStatus, LmiBlock, PhaseOneResult, SparseSym};
use crate::trigger::{self, TriggerDesign};

/// Eigenvalue floor applied when a designed `Y` is handed to a filter.
pub const DESIGN_CLAMP_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub mu: f64,
    pub gap_tol: f64,
    pub newton_tol: f64,
    pub max_newton_steps: usize,
    /// Phase-I slack below `-infeasibility_tol` certifies infeasibility.
    pub infeasibility_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let b = BarrierConfig::default();
        Self { mu: b.mu, gap_tol: b.gap_tol, newton_tol: b.newton_tol, max_newton_steps: b.max_newton_steps, infeasibility_tol: 1e-9 }
    }
}

impl SolverConfig {
    fn barrier(&self) -> BarrierConfig {
        BarrierConfig { mu: self.mu, gap_tol: self.gap_tol, newton_tol: self.newton_tol, max_newton_steps: self.max_newton_steps }
    }
}

#[derive(Debug, Clone)]
pub struct SdpProblem<'m> {
    model: &'m SystemModel,
    pi_blocks: Vec<SymMatrix>,
    delta: SymMatrix,
    delta_inv: SymMatrix,
    q_inv: DMatrix<f64>,
    r_inv: DMatrix<f64>,
}

impl<'m> SdpProblem<'m> {
    pub fn new(model: &'m SystemModel, delta: SymMatrix) -> Result<Self> {
        if delta.dim() != model.state_dim() {
            return Err(Error::DimensionMismatch(format!(
                "Delta is {}x{}, state dimension is {}",
                delta.dim(),
                delta.dim(),
                model.state_dim()
            )));
        }
        let delta_inv = delta.inverse_pd("Delta")?;
        let pi_blocks = model.stationary_stats()?.pi_blocks;
        let q_inv = model.q().inverse_pd("Q")?.into_inner();
        let r_inv = model.r().inverse_pd("R")?.into_inner();
        Ok(Self { model, pi_blocks, delta, delta_inv, q_inv, r_inv })
    }

    /// `Δ = δ I`.
    pub fn scalar_bound(model: &'m SystemModel, delta: f64) -> Result<Self> {
        Self::new(model, SymMatrix::identity(model.state_dim()).scale(delta))
    }

    pub fn model(&self) -> &SystemModel {
        self.model
    }

    pub fn pi_blocks(&self) -> &[SymMatrix] {
        &self.pi_blocks
    }

    pub fn delta(&self) -> &SymMatrix {
        &self.delta
    }

    fn n(&self) -> usize {
        self.model.state_dim()
    }

    fn s(&self) -> usize {
        self.model.meas_dim()
    }

    /// The LMI with `Y = 0` and `S = 0`.
    fn lmi_constant(&self) -> DMatrix<f64> {
        let (n, s) = (self.n(), self.s());
        let a = self.model.a();
        let c = self.model.c();
        let qa = &self.q_inv * a;
        let rc = &self.r_inv * c;
        let mut m = DMatrix::zeros(2 * n + s, 2 * n + s);
        m.view_mut((0, 0), (n, n)).copy_from(&(&self.q_inv + c.transpose() * &rc));
        m.view_mut((0, n), (n, n)).copy_from(&qa);
        m.view_mut((n, 0), (n, n)).copy_from(&qa.transpose());
        m.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * &qa));
        m.view_mut((2 * n, 0), (s, n)).copy_from(&rc);
        m.view_mut((0, 2 * n), (n, s)).copy_from(&rc.transpose());
        m.view_mut((2 * n, 2 * n), (s, s)).copy_from(&self.r_inv);
        numerics::symmetrize(&m).expect("square by construction").into_inner()
    }
}

/// Assembles the `(2n + s)`-dimensional LMI matrix for given `Y` blocks and `S`.
pub fn build_lmi(problem: &SdpProblem<'_>, y_blocks: &[SymMatrix], s_mat: &SymMatrix) -> Result<SymMatrix> {
    let model = problem.model;
    let n = problem.n();
    if s_mat.dim() != n {
        return Err(Error::DimensionMismatch(format!("S is {}x{}, expected {n}x{n}", s_mat.dim(), s_mat.dim())));
    }
    let dims: Vec<usize> = y_blocks.iter().map(|b| b.dim()).collect();
    if dims != model.sensor_dims() {
        return Err(Error::DimensionMismatch(format!("Y block sizes {dims:?} do not match sensor sizes {:?}", model.sensor_dims())));
    }
    let mut m = problem.lmi_constant();
    let mut top = m.view_mut((0, 0), (n, n));
    top -= s_mat.as_matrix();
    let mut mid = m.view_mut((n, n), (n, n));
    mid += s_mat.as_matrix();
    for (i, y) in y_blocks.iter().enumerate() {
        let off = 2 * n + model.sensor_offset(i);
        let mut b = m.view_mut((off, off), (y.dim(), y.dim()));
        b += y.as_matrix();
    }
    numerics::symmetrize(&m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

impl SdpStatus {
    pub fn label(self) -> &'static str {
        match self {
            SdpStatus::Optimal => "optimal",
            SdpStatus::Infeasible => "infeasible",
            SdpStatus::MaxIterations => "max-iterations",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub y_blocks: Vec<SymMatrix>,
    pub s: SymMatrix,
    /// `Σ tr(Π⁽ⁱ⁾Y⁽ⁱ⁾)`; infinite when infeasible.
    pub objective: f64,
    pub status: SdpStatus,
    /// Bound on the distance of `objective` from the optimum.
    pub gap_bound: f64,
    /// Optimal max-min-eigenvalue slack of the relaxed feasibility problem.
    pub phase_one_slack: f64,
    pub newton_steps: usize,
    pub warning: Option<String>,
}

impl SdpSolution {
    /// `Y⁽ⁱ⁾ + εI` with negative eigenvalues floored, ready for filtering.
    pub fn trigger_design(&self, eps: f64) -> Result<TriggerDesign> {
        Ok(TriggerDesign::from_floored(self.y_blocks.iter().map(|y| y.shift(eps)).collect(), eps))
    }
}

/// Index map from SDP variables to matrix entries.
struct Layout {
    /// `(sensor, p, q)` for each `Y` variable, `p ≤ q`.
    y_vars: Vec<(usize, usize, usize)>,
    /// `(p, q)` for each `S` variable, `p ≤ q`.
    s_vars: Vec<(usize, usize)>,
}

impl Layout {
    fn new(sensor_dims: &[usize], n: usize) -> Self {
        let mut y_vars = Vec::new();
        for (i, &d) in sensor_dims.iter().enumerate() {
            for p in 0..d {
                for q in p..d {
                    y_vars.push((i, p, q));
                }
            }
        }
        let s_vars = (0..n).flat_map(|p| (p..n).map(move |q| (p, q))).collect();
        Self { y_vars, s_vars }
    }

    fn num_vars(&self) -> usize {
        self.y_vars.len() + self.s_vars.len()
    }

    fn s_index(&self, k: usize) -> usize {
        self.y_vars.len() + k
    }

    fn pack(&self, y_blocks: &[SymMatrix], s_mat: &SymMatrix) -> DVector<f64> {
        let mut z = DVector::zeros(self.num_vars());
        for (k, &(i, p, q)) in self.y_vars.iter().enumerate() {
            z[k] = y_blocks[i][(p, q)];
        }
        for (k, &(p, q)) in self.s_vars.iter().enumerate() {
            z[self.s_index(k)] = s_mat[(p, q)];
        }
        z
    }

    fn unpack_s(&self, z: &DVector<f64>, n: usize) -> SymMatrix {
        let mut s = DMatrix::zeros(n, n);
        for (k, &(p, q)) in self.s_vars.iter().enumerate() {
            s[(p, q)] = z[self.s_index(k)];
            s[(q, p)] = z[self.s_index(k)];
        }
        SymMatrix::from_symmetrized(s)
    }

    fn unpack_y(&self, z: &DVector<f64>, sensor_dims: &[usize]) -> Vec<SymMatrix> {
        let mut ys: Vec<DMatrix<f64>> = sensor_dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        for (k, &(i, p, q)) in self.y_vars.iter().enumerate() {
            ys[i][(p, q)] = z[k];
            ys[i][(q, p)] = z[k];
        }
        ys.into_iter().map(SymMatrix::from_symmetrized).collect()
    }
}

/// `S` coefficients in the first two diagonal LMI blocks.
fn add_s_terms(lmi: &mut LmiBlock, layout: &Layout, n: usize, var_offset: usize) {
    for (k, &(p, q)) in layout.s_vars.iter().enumerate() {
        let mut coeff = SparseSym::unit(p, q, -1.0);
        coeff.extend(SparseSym::unit(n + p, n + q, 1.0));
        lmi.add_term(var_offset + k, coeff);
    }
}

/// `S − Δ⁻¹ ⪰ 0` with `S` starting at variable `var_offset`.
fn s_lower_block(problem: &SdpProblem<'_>, layout: &Layout, var_offset: usize) -> LmiBlock {
    let mut b = LmiBlock::new(-problem.delta_inv.as_matrix());
    for (k, &(p, q)) in layout.s_vars.iter().enumerate() {
        b.add_term(var_offset + k, SparseSym::unit(p, q, 1.0));
    }
    b
}

fn full_problem(problem: &SdpProblem<'_>, layout: &Layout) -> BarrierProblem {
    let n = problem.n();
    let model = problem.model;
    let mut objective = DVector::zeros(layout.num_vars());
    let mut lmi = LmiBlock::new(problem.lmi_constant());
    let mut y_psd: Vec<LmiBlock> = model.sensor_dims().iter().map(|&d| LmiBlock::new(DMatrix::zeros(d, d))).collect();
    for (k, &(i, p, q)) in layout.y_vars.iter().enumerate() {
        let off = 2 * n + model.sensor_offset(i);
        lmi.add_term(k, SparseSym::unit(off + p, off + q, 1.0));
        y_psd[i].add_term(k, SparseSym::unit(p, q, 1.0));
        let pi = problem.pi_blocks[i][(p, q)];
        objective[k] = if p == q { pi } else { 2.0 * pi };
    }
    add_s_terms(&mut lmi, layout, n, layout.y_vars.len());
    let mut blocks = vec![lmi, s_lower_block(problem, layout, layout.y_vars.len())];
    blocks.extend(y_psd);
    BarrierProblem { objective, blocks }
}

/// The `Y → ∞` limit of the LMI: only the upper-left `2n × 2n` part remains.
fn relaxed_problem(problem: &SdpProblem<'_>, layout: &Layout) -> BarrierProblem {
    let n = problem.n();
    let c0 = problem.lmi_constant().view((0, 0), (2 * n, 2 * n)).into_owned();
    let mut lmi = LmiBlock::new(c0);
    add_s_terms(&mut lmi, layout, n, 0);
    BarrierProblem { objective: DVector::zeros(layout.s_vars.len()), blocks: vec![lmi, s_lower_block(problem, layout, 0)] }
}

fn s_only_layout(n: usize) -> Layout {
    Layout::new(&[], n)
}

/// Minimizes `Σ tr(Π⁽ⁱ⁾Y⁽ⁱ⁾)` over the design LMI.
///
/// Feasibility is decided on the relaxed problem (`Y → ∞`), which is feasible
/// exactly when some finite `Y` is. A strictly feasible start is then found by
/// growing `Y = κI` from the relaxed certificate.
pub fn solve_sdp(problem: &SdpProblem<'_>, cfg: &SolverConfig) -> Result<SdpSolution> {
    let n = problem.n();
    let dims = problem.model.sensor_dims();
    let barrier = cfg.barrier();

    let s_layout = s_only_layout(n);
    let relaxed = relaxed_problem(problem, &s_layout);
    let z0 = s_layout.pack(&[], &problem.delta_inv);
    let p1 = relaxed.phase_one(&z0, &barrier, cfg.infeasibility_tol, true)?;
    let s0 = s_layout.unpack_s(&p1.z, n);
    let zero_y: Vec<SymMatrix> = dims.iter().map(|&d| SymMatrix::zeros(d)).collect();

    if p1.slack_upper < -cfg.infeasibility_tol {
        return Ok(SdpSolution {
            y_blocks: zero_y,
            s: s0,
            objective: f64::INFINITY,
            status: SdpStatus::Infeasible,
            gap_bound: f64::NAN,
            phase_one_slack: p1.slack,
            newton_steps: p1.newton_steps,
            warning: None,
        });
    }
    if !p1.strictly_feasible() {
        return Ok(SdpSolution {
            y_blocks: zero_y,
            s: s0,
            objective: f64::INFINITY,
            status: SdpStatus::MaxIterations,
            gap_bound: f64::NAN,
            phase_one_slack: p1.slack,
            newton_steps: p1.newton_steps,
            warning: Some(format!("feasible set is (nearly) empty: optimal slack in [{:.3e}, {:.3e}]", p1.slack, p1.slack_upper)),
        });
    }

    let layout = Layout::new(&dims, n);
    let full = full_problem(problem, &layout);
    let scale = problem.r_inv.norm().max(1.0) / p1.slack.min(1.0);
    let mut kappa = scale;
    let start = loop {
        let ys: Vec<SymMatrix> = dims.iter().map(|&d| SymMatrix::identity(d).scale(kappa)).collect();
        let z = layout.pack(&ys, &s0);
        if full.strictly_feasible(&z) {
            break z;
        }
        kappa *= 2.0;
        if kappa > 1e30 * scale {
            return Err(Error::NotConverged { iterations: 0, residual: p1.slack });
        }
    };

    let res = full.minimize(start, &barrier)?;
    let status = match res.status {
        BarrierStatus::Converged => SdpStatus::Optimal,
        BarrierStatus::MaxIterations => SdpStatus::MaxIterations,
    };
    let warning = (status == SdpStatus::MaxIterations)
        .then(|| format!("stopped after {} Newton steps with gap bound {:.3e}", res.newton_steps, res.gap_bound));
    Ok(SdpSolution {
        y_blocks: layout.unpack_y(&res.z, &dims),
        s: layout.unpack_s(&res.z, n),
        objective: res.objective,
        status,
        gap_bound: res.gap_bound,
        phase_one_slack: p1.slack,
        newton_steps: p1.newton_steps + res.newton_steps,
        warning,
    })
}

/// Max-min-eigenvalue slack over `S` of the LMI with `Y` held fixed; nonnegative
/// (up to solver tolerance) exactly when some `S ⪰ Δ⁻¹` satisfies the LMI.
pub fn lmi_slack(problem: &SdpProblem<'_>, y_blocks: &[SymMatrix], cfg: &SolverConfig) -> Result<PhaseOneResult> {
    let n = problem.n();
    let layout = s_only_layout(n);
    let constant = build_lmi(problem, y_blocks, &SymMatrix::zeros(n))?;
    let mut lmi = LmiBlock::new(constant.into_inner());
    add_s_terms(&mut lmi, &layout, n, 0);
    let p = BarrierProblem { objective: DVector::zeros(layout.num_vars()), blocks: vec![lmi, s_lower_block(problem, &layout, 0)] };
    p.phase_one(&layout.pack(&[], &problem.delta_inv), &cfg.barrier(), cfg.infeasibility_tol, false)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub bounds: BoundSet,
    /// `λ_min(Δ − P̄)`.
    pub bound_margin: f64,
    /// `λ_min` of the LMI at the solution.
    pub lmi_min_eig: f64,
    /// `λ_min(S − Δ⁻¹)`.
    pub s_margin: f64,
    pub rates: Vec<f64>,
    /// Bracket `(f(u), m·g(u/m))` on the total rate.
    pub rate_bracket: (f64, f64),
    pub violations: Vec<String>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Recomputes `P̄` from the solution's `Y` (regularized by `DESIGN_CLAMP_EPS`)
/// and checks `P̄ ⪯ Δ`, the LMI, and `S ⪰ Δ⁻¹`.
pub fn verify_design(problem: &SdpProblem<'_>, solution: &SdpSolution) -> Result<VerificationReport> {
    let model = problem.model;
    let design = solution.trigger_design(DESIGN_CLAMP_EPS)?;
    let bounds = analysis::compute_bounds(model, &design, &Tolerances::default())?;
    let bound_margin = numerics::min_eigenvalue(&problem.delta.sub(&bounds.p_bar));
    let lmi = build_lmi(problem, &solution.y_blocks, &solution.s)?;
    let lmi_min_eig = numerics::min_eigenvalue(&lmi);
    let s_margin = numerics::min_eigenvalue(&solution.s.sub(&problem.delta_inv));
    let stats = model.stationary_stats()?;
    let raw = TriggerDesign::from_floored(solution.y_blocks.clone(), 0.0);
    let rates = trigger::comm_rates(&stats, &raw);
    let rate_bracket = analysis::rate_bracket(&stats.pi_blocks, raw.blocks())?;

    let mut violations = Vec::new();
    if solution.status != SdpStatus::Optimal {
        violations.push(format!("solution status is {}", solution.status.label()));
    }
    if bound_margin < -1e-6 {
        violations.push(format!("P_bar exceeds Delta: min eigenvalue of Delta - P_bar is {bound_margin:.3e}"));
    }
    let lmi_scale = 1.0 + lmi.norm();
    if lmi_min_eig < -1e-7 * lmi_scale {
        violations.push(format!("LMI not PSD: min eigenvalue {lmi_min_eig:.3e}"));
    }
    if s_margin < -1e-7 {
        violations.push(format!("S below Delta^-1: min eigenvalue of S - Delta^-1 is {s_margin:.3e}"));
    }
    for (i, y) in solution.y_blocks.iter().enumerate() {
        let ev = numerics::min_eigenvalue(y);
        if ev < -1e-9 {
            violations.push(format!("Y block {i} not PSD: min eigenvalue {ev:.3e}"));
        }
    }
    Ok(VerificationReport { bounds, bound_margin, lmi_min_eig, s_margin, rates, rate_bracket, violations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub delta: f64,
    pub status: SdpStatus,
    pub objective: f64,
    /// `(Σλ⁽ⁱ⁾)/m`; `NaN` unless the point solved.
    pub avg_rate: f64,
    pub rates: Vec<f64>,
    pub y_blocks: Vec<SymMatrix>,
}

/// Solves the design problem with `Δ = δI` for every `δ` in the grid, in
/// parallel. Points that fail to solve are kept with their status.
pub fn sweep_designs(model: &SystemModel, delta_grid: &[f64], cfg: &SolverConfig) -> Result<Vec<SweepPoint>> {
    let stats = model.stationary_stats()?;
    delta_grid
        .par_iter()
        .map(|&delta| {
            let problem = SdpProblem::scalar_bound(model, delta)?;
            let sol = solve_sdp(&problem, cfg)?;
            let (rates, avg_rate) = if sol.status == SdpStatus::Optimal {
                let d = TriggerDesign::from_floored(sol.y_blocks.clone(), 0.0);
                let rates = trigger::comm_rates(&stats, &d);
                let avg = rates.iter().sum::<f64>() / rates.len() as f64;
                (rates, avg)
            } else {
                (Vec::new(), f64::NAN)
            };
            Ok(SweepPoint { delta, status: sol.status, objective: sol.objective, avg_rate, rates, y_blocks: sol.y_blocks })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelMatrices;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn scalar_model() -> SystemModel {
        SystemModel::scalar(0.5, 1.0, 1.0, 1.0, 1.0).unwrap()
    }

    fn scalar_root(a: f64, c: f64, q: f64, w: f64) -> f64 {
        let qa = c * c;
        let qb = w - a * a * w - q * c * c;
        let qc = -q * w;
        (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa)
    }

    /// `P̄(y)` for a scalar plant, in closed form.
    fn scalar_p_bar(a: f64, c: f64, q: f64, r: f64, y: f64) -> f64 {
        if y == 0.0 {
            return q / (1.0 - a * a);
        }
        let w = r + 1.0 / y;
        let x = scalar_root(a, c, q, w);
        x - x * x * c * c / (c * c * x + w)
    }

    /// Smallest `y` with `P̄(y) ≤ δ` by bisection; `None` if no `y` works.
    fn bisection_oracle(a: f64, c: f64, q: f64, r: f64, delta: f64) -> Option<f64> {
        let x_low = scalar_root(a, c, q, r);
        let p_min = x_low - x_low * x_low * c * c / (c * c * x_low + r);
        if delta <= p_min {
            return None;
        }
        if scalar_p_bar(a, c, q, r, 0.0) <= delta {
            return Some(0.0);
        }
        let mut hi = 1.0;
        while scalar_p_bar(a, c, q, r, hi) > delta {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if scalar_p_bar(a, c, q, r, mid) > delta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(hi)
    }

    #[test]
    fn build_lmi_scalar_example() {
        let model = scalar_model();
        let p = SdpProblem::scalar_bound(&model, 1.0).unwrap();
        let sigma = 0.3;
        let m = build_lmi(&p, &[SymMatrix::scalar(1.0)], &SymMatrix::scalar(sigma)).unwrap();
        let expected = dmatrix![2.0 - sigma, 0.5, 1.0; 0.5, 0.25 + sigma, 0.0; 1.0, 0.0, 2.0];
        assert!((m.as_matrix() - expected).amax() < 1e-14);
    }

    #[test]
    fn build_lmi_lower_right_block() {
        let m = two_sensor_model();
        let p = SdpProblem::scalar_bound(&m, 1.0).unwrap();
        let y = vec![SymMatrix::scalar(0.7), SymMatrix::scalar(1.9)];
        let lmi = build_lmi(&p, &y, &SymMatrix::identity(2)).unwrap();
        let r_inv = m.r().inverse_pd("R").unwrap();
        let expected = r_inv.as_matrix() + DMatrix::from_diagonal(&DVector::from_vec(vec![0.7, 1.9]));
        assert!((lmi.view((4, 4), (2, 2)) - expected).amax() < 1e-12);
        assert!(build_lmi(&p, &y[..1], &SymMatrix::identity(2)).is_err());
    }

    #[test]
    fn scalar_slack_bound_gives_zero_objective() {
        let model = scalar_model();
        let sigma = 1.0 / (1.0 - 0.25);
        let p = SdpProblem::scalar_bound(&model, sigma * 1.05).unwrap();
        let sol = solve_sdp(&p, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!(sol.objective <= 1e-6, "{}", sol.objective);
    }

    #[test]
    fn scalar_bound_below_full_information_is_infeasible() {
        let model = scalar_model();
        let x = scalar_root(0.5, 1.0, 1.0, 1.0);
        let p_min = x - x * x / (x + 1.0);
        let p = SdpProblem::scalar_bound(&model, p_min * 0.98).unwrap();
        let sol = solve_sdp(&p, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Infeasible);
        assert!(sol.phase_one_slack < -1e-9);
    }

    #[test]
    fn scalar_mid_range_matches_bisection() {
        for &(a, c, q, r) in &[(0.5, 1.0, 1.0, 1.0), (0.9, 2.0, 0.5, 3.0), (-0.7, 0.4, 2.0, 0.25)] {
            let model = SystemModel::scalar(a, c, q, r, 1.0).unwrap();
            let sigma = q / (1.0 - a * a);
            let x = scalar_root(a, c, q, r);
            let p_min = x - x * x * c * c / (c * c * x + r);
            let pi = c * c * sigma + r;
            for frac in [0.2, 0.5, 0.8] {
                let delta = p_min + frac * (sigma - p_min);
                let y = bisection_oracle(a, c, q, r, delta).unwrap();
                let p = SdpProblem::scalar_bound(&model, delta).unwrap();
                let sol = solve_sdp(&p, &SolverConfig::default()).unwrap();
                assert_eq!(sol.status, SdpStatus::Optimal, "a={a} frac={frac} {:?} slack={}", sol.warning, sol.phase_one_slack);
                let expected = pi * y;
                assert!((sol.objective - expected).abs() <= 1e-6 * expected.max(1.0), "a={a} frac={frac}: {} vs {expected}", sol.objective);
                assert!(verify_design(&p, &sol).unwrap().passed());
            }
        }
    }

    #[test]
    fn verification_flags_too_small_y() {
        let model = scalar_model();
        let sigma = 4.0 / 3.0;
        let x = scalar_root(0.5, 1.0, 1.0, 1.0);
        let p_min = x - x * x / (x + 1.0);
        let delta = 0.5 * (sigma + p_min);
        let y_star = bisection_oracle(0.5, 1.0, 1.0, 1.0, delta).unwrap();
        let p = SdpProblem::scalar_bound(&model, delta).unwrap();
        let mut sol = solve_sdp(&p, &SolverConfig::default()).unwrap();
        sol.y_blocks = vec![SymMatrix::scalar(0.5 * y_star)];
        let report = verify_design(&p, &sol).unwrap();
        assert!(!report.passed());
        assert!(report.bound_margin < -1e-6);
        assert!(report.violations.iter().any(|v| v.contains("P_bar exceeds Delta")));
    }

    #[test]
    fn rate_report_uses_rate_formula() {
        let model = scalar_model();
        let p = SdpProblem::scalar_bound(&model, 0.9).unwrap();
        let sol = solve_sdp(&p, &SolverConfig::default()).unwrap();
        let report = verify_design(&p, &sol).unwrap();
        let pi = 4.0 / 3.0 + 1.0;
        let y = sol.y_blocks[0][(0, 0)];
        let expected = 1.0 - 1.0 / (1.0 + pi * y).sqrt();
        assert!((report.rates[0] - expected).abs() < 1e-12);
        assert!(report.rate_bracket.0 <= report.rates[0] + 1e-12);
    }

    fn two_sensor_model() -> SystemModel {
        SystemModel::new(ModelMatrices {
            a: dmatrix![0.8, 0.2; -0.1, 0.6],
            sensor_blocks: vec![dmatrix![1.0, 0.0], dmatrix![0.5, 1.0]],
            q: dmatrix![1.0, 0.2; 0.2, 0.5],
            r: dmatrix![0.5, 0.1; 0.1, 0.8],
            sigma0: DMatrix::identity(2, 2),
        })
        .unwrap()
    }

    fn vector_sensor_model() -> SystemModel {
        SystemModel::new(ModelMatrices {
            a: dmatrix![0.9, 0.1, 0.0; 0.0, 0.7, 0.2; 0.1, 0.0, 0.5],
            sensor_blocks: vec![dmatrix![1.0, 0.0, 0.0; 0.0, 1.0, 0.0], dmatrix![0.0, 0.3, 1.0]],
            q: DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.3, 0.4])),
            r: dmatrix![0.4, 0.1, 0.0; 0.1, 0.6, 0.05; 0.0, 0.05, 0.3],
            sigma0: DMatrix::identity(3, 3),
        })
        .unwrap()
    }

    #[test]
    fn vector_sensor_design_verifies() {
        let model = vector_sensor_model();
        let fi = analysis::full_information_posterior(&model, &Tolerances::default()).unwrap();
        let sigma = model.stationary_stats().unwrap().sigma;
        let delta = 0.5 * (fi.norm() + numerics::min_eigenvalue(&sigma));
        let p = SdpProblem::scalar_bound(&model, delta).unwrap();
        let sol = solve_sdp(&p, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        let report = verify_design(&p, &sol).unwrap();
        assert!(report.passed(), "{:?}", report.violations);
        let total: f64 = report.rates.iter().sum();
        assert!(analysis::rate_lower_fn(sol.objective) <= total + 1e-9);
        // the bound is active at the optimum
        assert!(report.bound_margin < 1e-3 * delta);
    }

    #[test]
    fn objective_monotone_in_delta() {
        let model = two_sensor_model();
        let grid = [0.6, 0.8, 1.0, 1.3, 1.7, 2.5];
        let pts = sweep_designs(&model, &grid, &SolverConfig::default()).unwrap();
        let solved: Vec<_> = pts.iter().filter(|p| p.status == SdpStatus::Optimal).collect();
        assert!(solved.len() >= 4);
        for w in solved.windows(2) {
            assert!(w[0].objective >= w[1].objective - 1e-6);
            assert!(w[0].avg_rate >= w[1].avg_rate - 1e-9);
        }
    }

    #[test]
    fn huge_delta_gives_zero_rate() {
        let model = two_sensor_model();
        let pts = sweep_designs(&model, &[1e6], &SolverConfig::default()).unwrap();
        assert_eq!(pts[0].status, SdpStatus::Optimal);
        assert!(pts[0].avg_rate < 1e-6);
    }

    #[test]
    fn single_point_sweep_matches_solve() {
        let model = scalar_model();
        let pts = sweep_designs(&model, &[0.9], &SolverConfig::default()).unwrap();
        let sol = solve_sdp(&SdpProblem::scalar_bound(&model, 0.9).unwrap(), &SolverConfig::default()).unwrap();
        assert_eq!(pts[0].objective, sol.objective);
        assert_eq!(pts[0].y_blocks, sol.y_blocks);
    }

    #[test]
    fn scalar_oracle_tradeoff_is_monotone() {
        let (a, c, q, r) = (0.8, 1.0, 1.0, 0.5);
        let sigma = q / (1.0 - a * a);
        let mut prev = f64::INFINITY;
        for k in 1..20 {
            let delta = 0.5 + k as f64 * (sigma - 0.5) / 20.0;
            if let Some(y) = bisection_oracle(a, c, q, r, delta) {
                assert!(y <= prev);
                prev = y;
            }
        }
    }

    #[test]
    fn lmi_equivalence_on_scalar_grid() {
        let model = scalar_model();
        let sigma = 4.0 / 3.0;
        for &delta in &[0.7, 0.9, 1.1] {
            let p = SdpProblem::scalar_bound(&model, delta).unwrap();
            for k in 0..12 {
                let y = 0.05 * 1.6_f64.powi(k);
                let p_bar = scalar_p_bar(0.5, 1.0, 1.0, 1.0, y);
                if (p_bar - delta).abs() < 1e-4 || delta >= sigma {
                    continue;
                }
                let slack = lmi_slack(&p, &[SymMatrix::scalar(y)], &SolverConfig::default()).unwrap();
                assert_eq!(slack.slack_upper >= -1e-9, p_bar <= delta, "delta={delta} y={y} pbar={p_bar} slack={}", slack.slack);
            }
        }
    }

    #[test]
    fn lmi_equivalence_on_two_state_grid() {
        let model = two_sensor_model();
        let tol = Tolerances::default();
        let delta = SymMatrix::new(dmatrix![1.0, 0.1; 0.1, 0.8]).unwrap();
        let p = SdpProblem::new(&model, delta.clone()).unwrap();
        let mut agreed = 0;
        for &y1 in &[0.1, 0.5, 2.0, 8.0, 30.0] {
            for &y2 in &[0.1, 0.5, 2.0, 8.0, 30.0] {
                let design = TriggerDesign::scalar_multiples(&[1, 1], &[y1, y2]).unwrap();
                let bounds = analysis::compute_bounds(&model, &design, &tol).unwrap();
                let margin = numerics::min_eigenvalue(&delta.sub(&bounds.p_bar));
                if margin.abs() < 1e-4 {
                    continue;
                }
                let slack = lmi_slack(&p, design.blocks(), &SolverConfig::default()).unwrap();
                assert_eq!(slack.slack_upper >= -1e-9, margin >= 0.0, "y=({y1},{y2}) margin={margin}");
                agreed += 1;
            }
        }
        assert!(agreed >= 20);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn lmi_equivalence_random_scalar(a in -0.95f64..0.95, c in 0.2f64..2.0, q in 0.2f64..2.0, r in 0.2f64..2.0,
                                         frac in 0.05f64..0.95, y in 0.01f64..50.0) {
            let model = SystemModel::scalar(a, c, q, r, 1.0).unwrap();
            let sigma = q / (1.0 - a * a);
            let x = scalar_root(a, c, q, r);
            let p_min = x - x * x * c * c / (c * c * x + r);
            let delta = p_min + frac * (sigma - p_min);
            let p_bar = scalar_p_bar(a, c, q, r, y);
            prop_assume!((p_bar - delta).abs() > 1e-5 * delta);
            let p = SdpProblem::scalar_bound(&model, delta).unwrap();
            let slack = lmi_slack(&p, &[SymMatrix::scalar(y)], &SolverConfig::default()).unwrap();
            prop_assert_eq!(slack.slack_upper >= -1e-9, p_bar <= delta);
        }
    }
}
