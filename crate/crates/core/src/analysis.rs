//! Asymptotic performance of the event-triggered filter: the Riccati envelope
//! `X̲ ⪯ P_k⁻ ⪯ X̄`, the worst-case posterior `P̄`, and the bracket on the
//! achievable total communication rate.

use crate::error::{Error, Result};
use crate::model::SystemModel;
use crate::numerics::{self, SymMatrix, Tolerances};
use crate::trigger::TriggerDesign;

pub const DEFAULT_BURN_IN: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundSet {
    /// Fixed point of `g_R` (every sensor always transmits).
    pub x_lower: SymMatrix,
    /// Fixed point of `g_{R+Y⁻¹}` (every sensor always silent).
    pub x_upper: SymMatrix,
    /// `X̄ − X̄Cᵀ(CX̄Cᵀ + R + Y⁻¹)⁻¹CX̄`.
    pub p_bar: SymMatrix,
}

/// `R + Y⁻¹` for a strictly positive design.
pub fn drop_noise(model: &SystemModel, design: &TriggerDesign) -> Result<SymMatrix> {
    if design.sensor_dims() != model.sensor_dims() {
        return Err(Error::DimensionMismatch("trigger blocks do not match sensor dimensions".into()));
    }
    let inv: Vec<_> = design.inverse_blocks()?.into_iter().map(|b| b.into_inner()).collect();
    Ok(model.r().add(&SymMatrix::from_symmetrized(numerics::block_diag(&inv))))
}

/// `X − XCᵀ(CXCᵀ + W)⁻¹CX`.
pub fn posterior_of(model: &SystemModel, x: &SymMatrix, w: &SymMatrix) -> Result<SymMatrix> {
    let c = model.c();
    let xc = x.as_matrix() * c.transpose();
    let chol = (c * &xc + w.as_matrix()).cholesky().ok_or(Error::SingularInnovation)?;
    Ok(SymMatrix::from_symmetrized(x.as_matrix() - &xc * chol.solve(&xc.transpose())))
}

pub fn compute_bounds(model: &SystemModel, design: &TriggerDesign, tol: &Tolerances) -> Result<BoundSet> {
    let w_drop = drop_noise(model, design)?;
    let x_lower = numerics::riccati_fixed_point(model.a(), model.c(), model.q(), model.r(), tol)?;
    let x_upper = numerics::riccati_fixed_point(model.a(), model.c(), model.q(), &w_drop, tol)?;
    let p_bar = posterior_of(model, &x_upper, &w_drop)?;
    Ok(BoundSet { x_lower, x_upper, p_bar })
}

/// Steady-state posterior covariance when every sensor always transmits: the
/// smallest `P̄` any design can reach.
pub fn full_information_posterior(model: &SystemModel, tol: &Tolerances) -> Result<SymMatrix> {
    let x_lower = numerics::riccati_fixed_point(model.a(), model.c(), model.q(), model.r(), tol)?;
    posterior_of(model, &x_lower, model.r())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheckReport {
    /// Steps after burn-in.
    pub checked: usize,
    /// Steps after burn-in with `P_k⁻ ⋠ X̄ + εI` or `P_k⁻ ⋡ X̲ − εI`.
    pub violations: usize,
    /// `min_k ‖P_k⁻ − X̄‖` over the whole run (spectral norm).
    pub closest_to_upper: f64,
    /// `min_k ‖P_k⁻ − X̲‖`.
    pub closest_to_lower: f64,
    /// `max_k tr P_k⁻`; witnesses uniform boundedness.
    pub max_trace: f64,
}

/// Checks a trajectory of a-priori covariances against the Riccati envelope.
pub fn empirical_bound_check<'a, I>(priors: I, bounds: &BoundSet, epsilon: f64, burn_in: usize) -> BoundCheckReport
where
    I: IntoIterator<Item = &'a SymMatrix>,
{
    let mut report =
        BoundCheckReport { checked: 0, violations: 0, closest_to_upper: f64::INFINITY, closest_to_lower: f64::INFINITY, max_trace: 0.0 };
    for (k, p) in priors.into_iter().enumerate() {
        report.max_trace = report.max_trace.max(p.trace());
        let to_upper = bounds.x_upper.sub(p);
        let to_lower = p.sub(&bounds.x_lower);
        let up_ev = to_upper.eigenvalues();
        let lo_ev = to_lower.eigenvalues();
        report.closest_to_upper = report.closest_to_upper.min(spectral(&up_ev));
        report.closest_to_lower = report.closest_to_lower.min(spectral(&lo_ev));
        if k >= burn_in {
            report.checked += 1;
            if up_ev[0] < -epsilon || lo_ev[0] < -epsilon {
                report.violations += 1;
            }
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorCheckReport {
    pub checked: usize,
    /// Steps after burn-in with `P_k ⋠ P̄ + εI`.
    pub violations: usize,
    /// `min_k ‖P_k − P̄‖` over the run.
    pub closest_to_p_bar: f64,
}

/// The a-posteriori counterpart of [`empirical_bound_check`] against `P̄`.
pub fn posterior_bound_check<'a, I>(posteriors: I, p_bar: &SymMatrix, epsilon: f64, burn_in: usize) -> PosteriorCheckReport
where
    I: IntoIterator<Item = &'a SymMatrix>,
{
    let mut report = PosteriorCheckReport { checked: 0, violations: 0, closest_to_p_bar: f64::INFINITY };
    for (k, p) in posteriors.into_iter().enumerate() {
        let ev = p_bar.sub(p).eigenvalues();
        report.closest_to_p_bar = report.closest_to_p_bar.min(spectral(&ev));
        if k >= burn_in {
            report.checked += 1;
            if ev[0] < -epsilon {
                report.violations += 1;
            }
        }
    }
    report
}

fn spectral(sorted_ev: &[f64]) -> f64 {
    sorted_ev[0].abs().max(sorted_ev[sorted_ev.len() - 1].abs())
}

/// `f(x) = 1 − (1 + x)^{−1/2}`; lower envelope of the total rate.
pub fn rate_lower_fn(x: f64) -> f64 {
    1.0 - (1.0 + x).powf(-0.5)
}

/// `g(x) = 1 − exp(x)^{−1/2}`; per-sensor upper envelope.
pub fn rate_upper_fn(x: f64) -> f64 {
    1.0 - (-0.5 * x).exp()
}

/// `u = Σᵢ tr(Π⁽ⁱ⁾ Y⁽ⁱ⁾)`, the design objective.
pub fn weighted_trace(pi_blocks: &[SymMatrix], design_blocks: &[SymMatrix]) -> Result<f64> {
    if pi_blocks.len() != design_blocks.len() {
        return Err(Error::DimensionMismatch(format!("{} Pi blocks vs {} trigger blocks", pi_blocks.len(), design_blocks.len())));
    }
    pi_blocks
        .iter()
        .zip(design_blocks)
        .map(|(p, y)| {
            if p.dim() != y.dim() {
                return Err(Error::DimensionMismatch("Pi and trigger block sizes differ".into()));
            }
            Ok((p.as_matrix() * y.as_matrix()).trace())
        })
        .sum()
}

/// `(f(u), m·g(u/m))` for `u = Σ tr(Π⁽ⁱ⁾Y⁽ⁱ⁾)`.
pub fn rate_bracket(pi_blocks: &[SymMatrix], design_blocks: &[SymMatrix]) -> Result<(f64, f64)> {
    let u = weighted_trace(pi_blocks, design_blocks)?;
    let m = pi_blocks.len() as f64;
    Ok((rate_lower_fn(u), m * rate_upper_fn(u / m)))
}
