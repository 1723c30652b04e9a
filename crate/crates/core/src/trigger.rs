//! The stochastic event trigger.
//!
//! Sensor `i` holds back its measurement with probability
//! `φ⁽ⁱ⁾(y) = exp(−½ yᵀ Y⁽ⁱ⁾ y)`: it draws `ζ ~ U[0, 1]` and stays silent iff
//! `ζ ≤ φ⁽ⁱ⁾(y)`. Because the drop probability has a Gaussian shape, a silent
//! sensor still tells the estimator something about its measurement.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::StationaryStats;
use crate::numerics::{self, SymMatrix};
use crate::rng::{self, Stream};

/// Per-sensor trigger parameters `Y⁽¹⁾ … Y⁽ᵐ⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerDesign {
    blocks: Vec<SymMatrix>,
}

impl TriggerDesign {
    /// Fails if any block is not positive semidefinite (slack `1e-9` relative).
    pub fn new(blocks: Vec<SymMatrix>) -> Result<Self> {
        let tol = numerics::Tolerances::default();
        for (i, b) in blocks.iter().enumerate() {
            if !numerics::is_psd(b, &tol) {
                return Err(Error::NotPositiveDefinite { what: format!("trigger block {i} (must be PSD)") });
            }
        }
        Ok(Self { blocks })
    }

    /// Eigenvalues of every block floored at `eps` (`eps = 0` projects onto
    /// the PSD cone).
    pub fn from_floored(blocks: Vec<SymMatrix>, eps: f64) -> Self {
        Self { blocks }.clamped(eps)
    }

    /// `Y⁽ⁱ⁾ = yᵢ I` with `dims[i] = sᵢ`.
    pub fn scalar_multiples(dims: &[usize], ys: &[f64]) -> Result<Self> {
        if dims.len() != ys.len() {
            return Err(Error::DimensionMismatch(format!("{} sensors but {} multipliers", dims.len(), ys.len())));
        }
        Self::new(dims.iter().zip(ys).map(|(&d, &y)| SymMatrix::identity(d).scale(y)).collect())
    }

    pub fn blocks(&self) -> &[SymMatrix] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &SymMatrix {
        &self.blocks[i]
    }

    pub fn num_sensors(&self) -> usize {
        self.blocks.len()
    }

    pub fn sensor_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.dim()).collect()
    }

    /// `Y = diag(Y⁽¹⁾, …, Y⁽ᵐ⁾)`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let blocks: Vec<_> = self.blocks.iter().map(|b| b.as_matrix().clone()).collect();
        numerics::block_diag(&blocks)
    }

    /// Raises every eigenvalue of every block to at least `eps`, so the design
    /// can be inverted by the filter.
    pub fn clamped(&self, eps: f64) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                if numerics::min_eigenvalue(b) >= eps {
                    return b.clone();
                }
                let eig = nalgebra::SymmetricEigen::new(b.as_matrix().clone());
                let vals = eig.eigenvalues.map(|v| v.max(eps));
                SymMatrix::from_symmetrized(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
            })
            .collect();
        Self { blocks }
    }

    /// `(Y⁽ⁱ⁾)⁻¹` for every block; fails if any block is singular.
    pub fn inverse_blocks(&self) -> Result<Vec<SymMatrix>> {
        self.blocks.iter().enumerate().map(|(i, b)| b.inverse_pd(&format!("trigger block {i}"))).collect()
    }
}

/// Which sensors transmitted at one step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DecisionVector {
    pub gamma: Vec<bool>,
}

impl DecisionVector {
    pub fn all(m: usize, transmit: bool) -> Self {
        Self { gamma: vec![transmit; m] }
    }

    /// Decision pattern from the low `m` bits of `bits` (bit `i` = sensor `i`).
    pub fn from_bits(bits: u64, m: usize) -> Self {
        Self { gamma: (0..m).map(|i| bits >> i & 1 == 1).collect() }
    }

    pub fn num_sensors(&self) -> usize {
        self.gamma.len()
    }

    pub fn transmitted(&self) -> impl Iterator<Item = usize> + '_ {
        self.gamma.iter().enumerate().filter(|(_, g)| **g).map(|(i, _)| i)
    }

    pub fn count_transmitted(&self) -> usize {
        self.gamma.iter().filter(|g| **g).count()
    }

    /// Expanded mask `Ψ = diag(γ₁ I_{s₁}, …, γ_m I_{s_m})`.
    pub fn psi(&self, dims: &[usize]) -> DMatrix<f64> {
        let diag: Vec<f64> = self.gamma.iter().zip(dims).flat_map(|(&g, &d)| std::iter::repeat_n(if g { 1.0 } else { 0.0 }, d)).collect();
        DMatrix::from_diagonal(&DVector::from_vec(diag))
    }
}

/// Drop probability `φ⁽ⁱ⁾(y_i) = exp(−½ y_iᵀ Y⁽ⁱ⁾ y_i)`.
pub fn phi(i: usize, y_i: DVectorView<'_, f64>, design: &TriggerDesign) -> Result<f64> {
    let yb = design.block(i);
    if y_i.len() != yb.dim() {
        return Err(Error::DimensionMismatch(format!("sensor {i}: measurement has {} entries, block is {}", y_i.len(), yb.dim())));
    }
    Ok((-0.5 * (y_i.transpose() * yb.as_matrix() * y_i)[(0, 0)]).exp())
}

/// One independent uniform stream per sensor.
#[derive(Debug, Clone)]
pub struct TriggerStreams {
    streams: Vec<Stream>,
}

impl TriggerStreams {
    /// Sensor `i` draws from the substream `path ++ [i]` of `master`.
    pub fn new(master: u64, path: &[u64], m: usize) -> Self {
        let streams = (0..m)
            .map(|i| {
                let mut p = path.to_vec();
                p.push(i as u64);
                rng::derive(master, &p)
            })
            .collect();
        Self { streams }
    }

    pub fn sensor(&mut self, i: usize) -> &mut Stream {
        &mut self.streams[i]
    }
}

/// Draws `γ⁽ⁱ⁾` for every sensor from the full stacked measurement `y`.
pub fn draw_decisions(y: &DVector<f64>, design: &TriggerDesign, streams: &mut TriggerStreams) -> Result<DecisionVector> {
    let dims = design.sensor_dims();
    let total: usize = dims.iter().sum();
    if y.len() != total {
        return Err(Error::DimensionMismatch(format!("measurement has {} entries, design expects {total}", y.len())));
    }
    let mut off = 0;
    let mut gamma = Vec::with_capacity(dims.len());
    for (i, &d) in dims.iter().enumerate() {
        let p = phi(i, y.rows(off, d), design)?;
        let zeta: f64 = streams.sensor(i).random();
        gamma.push(zeta > p);
        off += d;
    }
    Ok(DecisionVector { gamma })
}

/// `λ⁽ⁱ⁾ = 1 − det(I + Π⁽ⁱ⁾ Y⁽ⁱ⁾)^{−1/2}`.
pub fn comm_rate(i: usize, stats: &StationaryStats, design: &TriggerDesign) -> f64 {
    rate_from_blocks(&stats.pi_blocks[i], design.block(i))
}

pub fn comm_rates(stats: &StationaryStats, design: &TriggerDesign) -> Vec<f64> {
    (0..design.num_sensors()).map(|i| comm_rate(i, stats, design)).collect()
}

pub(crate) fn rate_from_blocks(pi: &SymMatrix, y: &SymMatrix) -> f64 {
    let d = pi.dim();
    let m = DMatrix::identity(d, d) + pi.as_matrix() * y.as_matrix();
    let det = m.determinant();
    1.0 - 1.0 / det.sqrt()
}

/// Smallest `y ≥ 0` such that `Y⁽ⁱ⁾ = y I` makes sensor `i` transmit at
/// `target_rate`, within `1e-10`.
pub fn rate_to_scalar_y(i: usize, stats: &StationaryStats, target_rate: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&target_rate) {
        return Err(Error::UnreachableRate(target_rate));
    }
    if target_rate == 0.0 {
        return Ok(0.0);
    }
    let pi = &stats.pi_blocks[i];
    let id = SymMatrix::identity(pi.dim());
    let rate = |y: f64| rate_from_blocks(pi, &id.scale(y));
    let mut hi = 1.0 / pi.trace();
    while rate(hi) < target_rate {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::UnreachableRate(target_rate));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if rate(mid) < target_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let y = if (rate(lo) - target_rate).abs() < (rate(hi) - target_rate).abs() { lo } else { hi };
    debug_assert!((rate(y) - target_rate).abs() <= 1e-10);
    Ok(y)
}
