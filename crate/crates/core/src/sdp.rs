//! A small dense primal barrier solver for linear objectives over linear
//! matrix inequalities:
//!
//! ```text
//! minimize cᵀz   subject to   F_j(z) = F_j0 + Σ_k z_k F_jk ⪰ 0,  j = 1..J
//! ```
//!
//! Coefficient matrices are stored as sparse entry lists, which keeps the
//! Newton system cheap: `H_kl = Σ_j tr(F_j⁻¹ F_jk F_j⁻¹ F_jl)` only touches the
//! few nonzeros of each coefficient.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const MAX_CENTERING_STEPS: usize = 100;

/// Symmetric coefficient matrix as `(row, col, value)` triples. Off-diagonal
/// entries are listed in both positions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseSym {
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseSym {
    /// `v · (e_i e_jᵀ + e_j e_iᵀ) / (1 + [i == j])`, i.e. one symmetric slot.
    pub fn unit(i: usize, j: usize, v: f64) -> Self {
        if i == j {
            Self { entries: vec![(i, i, v)] }
        } else {
            Self { entries: vec![(i, j, v), (j, i, v)] }
        }
    }

    pub fn extend(&mut self, other: SparseSym) {
        self.entries.extend(other.entries);
    }

    pub fn scaled_identity(offset: usize, dim: usize, v: f64) -> Self {
        Self { entries: (offset..offset + dim).map(|i| (i, i, v)).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiBlock {
    pub constant: DMatrix<f64>,
    /// `(variable index, coefficient)`; variables not listed have zero
    /// coefficient in this block.
    pub terms: Vec<(usize, SparseSym)>,
}

impl LmiBlock {
    pub fn new(constant: DMatrix<f64>) -> Self {
        Self { constant, terms: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    pub fn add_term(&mut self, var: usize, coeff: SparseSym) {
        if let Some((_, c)) = self.terms.iter_mut().find(|(v, _)| *v == var) {
            c.extend(coeff);
        } else {
            self.terms.push((var, coeff));
        }
    }

    pub fn evaluate(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (var, coeff) in &self.terms {
            let zv = z[*var];
            if zv != 0.0 {
                for &(r, c, v) in &coeff.entries {
                    m[(r, c)] += zv * v;
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierProblem {
    pub objective: DVector<f64>,
    pub blocks: Vec<LmiBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierConfig {
    /// Barrier parameter growth per outer step.
    pub mu: f64,
    /// Stop once the gap bound `N/t` falls below `gap_tol · (1 + |cᵀz|)`.
    pub gap_tol: f64,
    /// Centering stops when half the squared Newton decrement is below this.
    pub newton_tol: f64,
    /// Total Newton step budget.
    pub max_newton_steps: usize,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self { mu: 5.0, gap_tol: 1e-8, newton_tol: 1e-8, max_newton_steps: 2_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierResult {
    pub z: DVector<f64>,
    pub objective: f64,
    /// Bound on `cᵀz − optimum` at the last centered point.
    pub gap_bound: f64,
    pub newton_steps: usize,
    pub status: BarrierStatus,
}

/// Outcome of maximizing the common slack `s` in `F_j(z) ⪰ s I`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOneResult {
    pub z: DVector<f64>,
    /// Achieved slack (a lower bound on the optimum).
    pub slack: f64,
    /// Upper bound on the optimal slack.
    pub slack_upper: f64,
    pub newton_steps: usize,
}

impl PhaseOneResult {
    pub fn strictly_feasible(&self) -> bool {
        self.slack > 0.0
    }
}

/// Cholesky factors of all blocks at `z`, or `None` if any block is not
/// positive definite.
fn factor_all(blocks: &[LmiBlock], z: &DVector<f64>) -> Option<Vec<Cholesky<f64, Dyn>>> {
    blocks.iter().map(|b| Cholesky::new(b.evaluate(z))).collect()
}

impl BarrierProblem {
    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    /// Sum of block dimensions; the barrier's self-concordance parameter.
    pub fn barrier_degree(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }

    pub fn strictly_feasible(&self, z: &DVector<f64>) -> bool {
        factor_all(&self.blocks, z).is_some()
    }

    /// Smallest eigenvalue over all blocks at `z`.
    pub fn min_eigenvalue(&self, z: &DVector<f64>) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let m = b.evaluate(z);
                nalgebra::SymmetricEigen::new((&m + m.transpose()) * 0.5).eigenvalues.min()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Gradient and Hessian of `t cᵀz − Σ log det F_j(z)`.
    fn derivatives(&self, t: f64, facts: &[Cholesky<f64, Dyn>]) -> (DVector<f64>, DMatrix<f64>) {
        let nv = self.num_vars();
        let mut g = &self.objective * t;
        let mut h = DMatrix::zeros(nv, nv);
        for (block, ch) in self.blocks.iter().zip(facts) {
            let finv = ch.inverse();
            for (ka, (va, ca)) in block.terms.iter().enumerate() {
                g[*va] -= ca.entries.iter().map(|&(a, b, v)| v * finv[(b, a)]).sum::<f64>();
                for (vb, cb) in &block.terms[ka..] {
                    let mut acc = 0.0;
                    for &(a, b, v) in &ca.entries {
                        for &(c, d, u) in &cb.entries {
                            acc += v * u * finv[(b, c)] * finv[(d, a)];
                        }
                    }
                    h[(*va, *vb)] += acc;
                    if va != vb {
                        h[(*vb, *va)] += acc;
                    }
                }
            }
        }
        (g, h)
    }

    fn newton_direction(g: &DVector<f64>, h: DMatrix<f64>) -> Option<DVector<f64>> {
        let scale = h.diagonal().amax().max(1e-300);
        let mut ridge = 0.0;
        for _ in 0..8 {
            let mut hr = h.clone();
            for i in 0..hr.nrows() {
                hr[(i, i)] += ridge;
            }
            if let Some(ch) = Cholesky::new(hr) {
                return Some(-ch.solve(g));
            }
            ridge = if ridge == 0.0 { 1e-14 * scale } else { ridge * 100.0 };
        }
        None
    }

    /// Damped Newton centering at fixed `t`.
    ///
    /// The step `1/(1 + λ)` decreases a self-concordant function without any
    /// function evaluations, which stay reliable when `t cᵀz` is huge. Once
    /// `λ < 1/4`, centering also stops when rounding noise keeps the decrement
    /// from shrinking.
    fn center(&self, t: f64, z: &mut DVector<f64>, cfg: &BarrierConfig, budget: usize) -> Result<Centering> {
        let mut steps = 0;
        let mut best = f64::INFINITY;
        let mut since_best = 0;
        loop {
            let facts = factor_all(&self.blocks, z).ok_or_else(|| Error::Oracle("barrier iterate left the feasible set".into()))?;
            let (g, h) = self.derivatives(t, &facts);
            let Some(dz) = Self::newton_direction(&g, h) else {
                return Ok(Centering { steps, decrement: f64::INFINITY });
            };
            let decrement = -g.dot(&dz);
            if decrement < 0.5 * best {
                best = decrement;
                since_best = 0;
            } else {
                since_best += 1;
            }
            let lambda = decrement.max(0.0).sqrt();
            let stalled = lambda < 0.25 && since_best >= 4;
            if decrement / 2.0 <= cfg.newton_tol || stalled || steps >= budget.min(MAX_CENTERING_STEPS) {
                return Ok(Centering { steps, decrement });
            }
            let mut alpha = if lambda > 0.25 { 1.0 / (1.0 + lambda) } else { 1.0 };
            loop {
                let trial = &*z + &dz * alpha;
                if factor_all(&self.blocks, &trial).is_some() {
                    *z = trial;
                    break;
                }
                alpha *= 0.5;
                if alpha < 1e-14 {
                    return Ok(Centering { steps, decrement });
                }
            }
            steps += 1;
        }
    }

    /// Path-following from a strictly feasible `z0`.
    pub fn minimize(&self, z0: DVector<f64>, cfg: &BarrierConfig) -> Result<BarrierResult> {
        if z0.len() != self.num_vars() {
            return Err(Error::DimensionMismatch(format!("start has {} entries, problem has {} variables", z0.len(), self.num_vars())));
        }
        if !self.strictly_feasible(&z0) {
            return Err(Error::Oracle("barrier start point is not strictly feasible".into()));
        }
        let degree = self.barrier_degree() as f64;
        let mut z = z0;
        let mut t = degree / (1.0 + self.objective.dot(&z).abs());
        let mut used = 0;
        loop {
            let c = self.center(t, &mut z, cfg, cfg.max_newton_steps - used)?;
            used += c.steps;
            let objective = self.objective.dot(&z);
            let gap_bound = c.gap_bound(degree, t);
            let done = gap_bound <= cfg.gap_tol * (1.0 + objective.abs());
            if done || used >= cfg.max_newton_steps || (c.steps == 0 && !gap_bound.is_finite()) {
                let status = if done { BarrierStatus::Converged } else { BarrierStatus::MaxIterations };
                return Ok(BarrierResult { z, objective, gap_bound, newton_steps: used, status });
            }
            t *= cfg.mu;
        }
    }

    /// Maximizes `s` subject to `F_j(z) ⪰ s I` from any `z0`.
    ///
    /// The feasible set of the augmented problem must be bounded in every
    /// direction that does not decrease `s`. Stops early once the slack is
    /// certified below `-infeasibility_tol`, or, when `stop_if_positive` is set,
    /// as soon as an iterate has positive slack.
    pub fn phase_one(
        &self,
        z0: &DVector<f64>,
        cfg: &BarrierConfig,
        infeasibility_tol: f64,
        stop_if_positive: bool,
    ) -> Result<PhaseOneResult> {
        let nv = self.num_vars();
        let s_var = nv;
        let mut blocks = self.blocks.clone();
        for b in &mut blocks {
            let d = b.dim();
            b.add_term(s_var, SparseSym::scaled_identity(0, d, -1.0));
        }
        let mut objective = DVector::zeros(nv + 1);
        objective[s_var] = -1.0;
        let aug = BarrierProblem { objective, blocks };

        let s0 = self.min_eigenvalue(z0);
        let mut z = DVector::zeros(nv + 1);
        z.rows_mut(0, nv).copy_from(z0);
        z[s_var] = s0 - 1.0 - s0.abs() * 0.1;

        let degree = aug.barrier_degree() as f64;
        let mut t = degree / (1.0 + z[s_var].abs());
        let mut used = 0;
        loop {
            let c = aug.center(t, &mut z, cfg, cfg.max_newton_steps - used)?;
            used += c.steps;
            let slack = z[s_var];
            let gap_bound = c.gap_bound(degree, t);
            let slack_upper = slack + gap_bound;
            let finish = |z: &DVector<f64>| PhaseOneResult { z: z.rows(0, nv).into_owned(), slack, slack_upper, newton_steps: used };
            if slack_upper < -infeasibility_tol || (stop_if_positive && slack > 0.0) {
                return Ok(finish(&z));
            }
            if gap_bound <= cfg.gap_tol * (1.0 + slack.abs()) || used >= cfg.max_newton_steps || (c.steps == 0 && !gap_bound.is_finite()) {
                return Ok(finish(&z));
            }
            t *= cfg.mu;
        }
    }
}

struct Centering {
    steps: usize,
    /// Squared Newton decrement `λ²` at the final iterate.
    decrement: f64,
}

impl Centering {
    /// Bound on the suboptimality of the iterate: `(N + √N λ)/t`, valid for
    /// `λ < 1` through the dual point built from the Newton step.
    fn gap_bound(&self, degree: f64, t: f64) -> f64 {
        let lambda = self.decrement.max(0.0).sqrt();
        if lambda < 1.0 {
            (degree + degree.sqrt() * lambda) / t
        } else {
            f64::INFINITY
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    /// minimize x subject to [[x, 1], [1, y]] ⪰ 0, y ≤ 4  →  x = 1/4.
    fn toy() -> BarrierProblem {
        let mut lmi = LmiBlock::new(dmatrix![0.0, 1.0; 1.0, 0.0]);
        lmi.add_term(0, SparseSym::unit(0, 0, 1.0));
        lmi.add_term(1, SparseSym::unit(1, 1, 1.0));
        let mut cap = LmiBlock::new(dmatrix![4.0]);
        cap.add_term(1, SparseSym::unit(0, 0, -1.0));
        BarrierProblem { objective: DVector::from_vec(vec![1.0, 0.0]), blocks: vec![lmi, cap] }
    }

    #[test]
    fn toy_problem_optimum() {
        let p = toy();
        let r = p.minimize(DVector::from_vec(vec![10.0, 2.0]), &BarrierConfig::default()).unwrap();
        assert_eq!(r.status, BarrierStatus::Converged);
        assert!((r.objective - 0.25).abs() < 1e-8, "{}", r.objective);
    }

    #[test]
    fn phase_one_finds_interior_point() {
        let p = toy();
        let r = p.phase_one(&DVector::from_vec(vec![-3.0, -3.0]), &BarrierConfig::default(), 1e-9, true).unwrap();
        assert!(r.strictly_feasible());
        assert!(p.strictly_feasible(&r.z));
    }

    #[test]
    fn phase_one_certifies_infeasibility() {
        // x ⪰ s, −x − 1 ⪰ s  →  s* = −1/2
        let mut a = LmiBlock::new(dmatrix![0.0]);
        a.add_term(0, SparseSym::unit(0, 0, 1.0));
        let mut b = LmiBlock::new(dmatrix![-1.0]);
        b.add_term(0, SparseSym::unit(0, 0, -1.0));
        let p = BarrierProblem { objective: DVector::from_vec(vec![0.0]), blocks: vec![a, b] };
        let r = p.phase_one(&DVector::from_vec(vec![0.0]), &BarrierConfig::default(), 1e-9, false).unwrap();
        assert!(r.slack_upper < -1e-9);
        assert!(r.slack <= -0.5 + 1e-12 && r.slack_upper >= -0.5 - 1e-12);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        assert!(toy().minimize(DVector::from_vec(vec![0.0, 0.0]), &BarrierConfig::default()).is_err());
    }
}
