//! Monte Carlo comparison of scheduling strategies on a seeded data-center
//! thermal scenario.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::design::{self, SdpStatus, SolverConfig, SweepPoint, DESIGN_CLAMP_EPS};
use crate::error::{Error, Result};
use crate::filter::{Schedule, TrajectoryRunner, TrialStreams};
use crate::model::{ModelMatrices, StationaryStats, SystemModel};
use crate::numerics::{self, SymMatrix, Tolerances};
use crate::rng::{self, domain};
use crate::trigger::{self, TriggerDesign};

pub const SERVERS: usize = 16;
pub const AIR_CONDITIONERS: usize = 3;
pub const OTHER_DEVICES: usize = 1;
pub const SAMPLE_PERIOD_S: f64 = 150.0;
/// Target per-component mean absolute process noise (kelvin).
pub const PROCESS_NOISE_MAG: f64 = 0.1;
/// Target per-component mean absolute measurement noise (kelvin).
pub const MEASUREMENT_NOISE_MAG: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioNotes {
    pub seed: u64,
    /// Regeneration attempts needed to get a stable plant.
    pub attempts: u32,
    pub spectral_radius: f64,
    /// Factors applied to `GGᵀ` to hit the noise magnitudes.
    pub process_scale: f64,
    pub measurement_scale: f64,
    pub thermal_constants: Vec<f64>,
    /// `1 − Σ_l Ψ_jl`: heat exchanged with the room per device.
    pub leakage: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: SystemModel,
    pub label: String,
    pub notes: ScenarioNotes,
}

/// Device kind by state index: servers first, then air conditioners, then the rest.
pub fn device_label(j: usize) -> &'static str {
    if j < SERVERS {
        "server"
    } else if j < SERVERS + AIR_CONDITIONERS {
        "air-conditioner"
    } else {
        "other"
    }
}

/// `c²` with `mean_i √(c² M_ii) · √(2/π) = target`.
fn magnitude_scale(m: &DMatrix<f64>, target: f64) -> f64 {
    let n = m.nrows() as f64;
    let mean_sd = m.diagonal().iter().map(|v| v.sqrt()).sum::<f64>() / n;
    let c = target / (mean_sd * (2.0 / std::f64::consts::PI).sqrt());
    c * c
}

fn random_gram<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>());
    &g * g.transpose()
}

/// A 20-device thermal network: `Ṫ_j = k_j (Σ_l Ψ_jl T_l − T_j)`, where the
/// rows of `Ψ` mix the exhaust of all devices and sum to `1 − leak_j`.
/// Discretized at 150 s; sensor `j` reads the inlet temperature `(ΨT)_j`.
pub fn generate_datacenter_scenario(seed: u64) -> Result<Scenario> {
    let n = SERVERS + AIR_CONDITIONERS + OTHER_DEVICES;
    for attempt in 0..100u32 {
        let mut rng = rng::derive(seed, &[domain::SCENARIO, attempt as u64]);
        let leakage: Vec<f64> = (0..n)
            .map(|j| match device_label(j) {
                "air-conditioner" => rng.random_range(0.3..0.5),
                _ => rng.random_range(0.05..0.2),
            })
            .collect();
        let mut psi = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>());
        for j in 0..n {
            let s: f64 = psi.row(j).sum();
            let scale = (1.0 - leakage[j]) / s;
            psi.row_mut(j).scale_mut(scale);
        }
        let k: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.01)).collect();
        let kmat = DMatrix::from_diagonal(&DVector::from_vec(k.clone()));
        let cont = kmat * (&psi - DMatrix::identity(n, n));
        let a = (cont * SAMPLE_PERIOD_S).exp();
        let rho = numerics::spectral_radius(&a)?;
        if rho >= 1.0 - 1e-6 {
            continue;
        }
        let q0 = random_gram(n, &mut rng);
        let r0 = random_gram(n, &mut rng);
        let process_scale = magnitude_scale(&q0, PROCESS_NOISE_MAG);
        let measurement_scale = magnitude_scale(&r0, MEASUREMENT_NOISE_MAG);
        let q = numerics::symmetrize(&(q0 * process_scale))?.into_inner();
        let r = numerics::symmetrize(&(r0 * measurement_scale))?.into_inner();
        let sigma = numerics::solve_lyapunov(&a, &SymMatrix::new(q.clone())?)?;
        let sensor_blocks = (0..n).map(|j| psi.rows(j, 1).into_owned()).collect();
        let model = match SystemModel::new(ModelMatrices { a, sensor_blocks, q, r, sigma0: sigma.into_inner() }) {
            Ok(m) => m,
            Err(Error::InvalidModel(_)) => continue,
            Err(e) => return Err(e),
        };
        return Ok(Scenario {
            model,
            label: format!("datacenter-{seed}"),
            notes: ScenarioNotes {
                seed,
                attempts: attempt + 1,
                spectral_radius: rho,
                process_scale,
                measurement_scale,
                thermal_constants: k,
                leakage,
            },
        });
    }
    Err(Error::Config(format!("no stable scenario found for seed {seed}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Random,
    Uniform,
    Optimized,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Random, ScheduleKind::Uniform, ScheduleKind::Optimized];

    pub fn label(self) -> &'static str {
        match self {
            ScheduleKind::Random => "random",
            ScheduleKind::Uniform => "stochastic-uniform",
            ScheduleKind::Optimized => "stochastic-optimized",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub rate_grid: Vec<f64>,
    pub trials: usize,
    pub horizon: usize,
    pub burn_in: usize,
    pub master_seed: u64,
    /// Log-spaced `δ` values for the optimized-design sweep.
    pub delta_points: usize,
    pub solver: SolverConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rate_grid: (1..10).map(|k| k as f64 / 10.0).collect(),
            trials: 10_000,
            horizon: 500,
            burn_in: analysis::DEFAULT_BURN_IN,
            master_seed: 0,
            delta_points: 40,
            solver: SolverConfig::default(),
        }
    }
}

/// Time-averaged statistics of one trial after burn-in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialSummary {
    pub trace_prior_cov: f64,
    pub prior_squared_error: f64,
    pub transmissions: usize,
    pub slots: usize,
    /// `X̲ − ε ⪯ P_k⁻ ⪯ X̄ + ε` failures (only counted when bounds are supplied).
    pub bound_violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatePoint {
    pub schedule: ScheduleKind,
    pub target_rate: f64,
    pub empirical_rate: f64,
    pub trace_prior_cov: f64,
    pub trace_std_error: f64,
    pub empirical_mse: f64,
    pub mse_std_error: f64,
    pub trials: usize,
    pub horizon: usize,
    /// Predicted average rate of the trigger design actually run.
    pub predicted_rate: f64,
    pub per_trial: Vec<TrialSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundPoint {
    pub target_rate: f64,
    pub trace_x_lower: f64,
    pub trace_x_upper: f64,
    pub trace_p_bar: f64,
    /// Empirical time-averaged `tr E[P_k⁻]` of the uniform stochastic design.
    pub trace_prior_cov: f64,
    pub violations: usize,
}

/// The optimized design used at one rate point.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizedChoice {
    pub target_rate: f64,
    pub delta: f64,
    /// Scalar applied to `Y*` to land exactly on the target rate.
    pub rescale: f64,
    pub design: TriggerDesign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResults {
    pub points: Vec<RatePoint>,
    pub bounds: Vec<BoundPoint>,
    pub sweep: Vec<SweepPoint>,
    pub optimized: Vec<OptimizedChoice>,
}

impl ExperimentResults {
    pub fn point(&self, schedule: ScheduleKind, rate: f64) -> Option<&RatePoint> {
        self.points.iter().find(|p| p.schedule == schedule && p.target_rate == rate)
    }

    pub fn curve(&self, schedule: ScheduleKind) -> Vec<&RatePoint> {
        let mut v: Vec<_> = self.points.iter().filter(|p| p.schedule == schedule).collect();
        v.sort_by(|a, b| a.target_rate.total_cmp(&b.target_rate));
        v
    }
}

fn mean_and_se(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, f64::NAN);
    }
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs `trials` independent trajectories, in parallel, reduced in trial order.
pub fn run_trials(
    model: &SystemModel,
    schedule: &Schedule,
    trials: usize,
    horizon: usize,
    burn_in: usize,
    master_seed: u64,
    bounds: Option<&analysis::BoundSet>,
) -> Result<Vec<TrialSummary>> {
    if burn_in >= horizon {
        return Err(Error::Config(format!("burn-in {burn_in} must be shorter than horizon {horizon}")));
    }
    let tol = Tolerances { psd_slack: 0.0, ..Tolerances::default() };
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut streams = TrialStreams::new(master_seed, t as u64, model.num_sensors());
            let mut s = TrialSummary { trace_prior_cov: 0.0, prior_squared_error: 0.0, transmissions: 0, slots: 0, bound_violations: 0 };
            for (k, step) in TrajectoryRunner::new(model, schedule, horizon, &mut streams)?.enumerate() {
                let step = step?;
                if k < burn_in {
                    continue;
                }
                s.trace_prior_cov += step.state.p_prior.trace();
                s.prior_squared_error += step.prior_squared_error();
                s.transmissions += step.record.decision.count_transmitted();
                s.slots += model.num_sensors();
                if let Some(b) = bounds {
                    let eps = 1e-6;
                    let p = &step.state.p_prior;
                    if !numerics::loewner_le(p, &b.x_upper.shift(eps), &tol) || !numerics::loewner_le(&b.x_lower.shift(-eps), p, &tol) {
                        s.bound_violations += 1;
                    }
                }
            }
            let steps = (horizon - burn_in) as f64;
            s.trace_prior_cov /= steps;
            s.prior_squared_error /= steps;
            Ok(s)
        })
        .collect()
}

fn summarize(schedule: ScheduleKind, target_rate: f64, predicted_rate: f64, horizon: usize, per_trial: Vec<TrialSummary>) -> RatePoint {
    let (trace, trace_se) = mean_and_se(per_trial.iter().map(|s| s.trace_prior_cov));
    let (mse, mse_se) = mean_and_se(per_trial.iter().map(|s| s.prior_squared_error));
    let tx: usize = per_trial.iter().map(|s| s.transmissions).sum();
    let slots: usize = per_trial.iter().map(|s| s.slots).sum();
    RatePoint {
        schedule,
        target_rate,
        empirical_rate: tx as f64 / slots as f64,
        trace_prior_cov: trace,
        trace_std_error: trace_se,
        empirical_mse: mse,
        mse_std_error: mse_se,
        trials: per_trial.len(),
        horizon,
        predicted_rate,
        per_trial,
    }
}

fn avg_rate(stats: &StationaryStats, design: &TriggerDesign) -> f64 {
    let r = trigger::comm_rates(stats, design);
    r.iter().sum::<f64>() / r.len() as f64
}

/// Scales `base` by `c` so the average predicted rate equals `target`.
fn rescale_to_rate(stats: &StationaryStats, base: &[SymMatrix], target: f64) -> Result<(f64, TriggerDesign)> {
    let make = |c: f64| TriggerDesign::from_floored(base.iter().map(|y| y.scale(c)).collect(), 0.0);
    let rate = |c: f64| avg_rate(stats, &make(c));
    if rate(1.0) <= 0.0 {
        return Err(Error::UnreachableRate(target));
    }
    let (mut lo, mut hi) = (1.0, 1.0);
    while rate(lo) > target {
        lo *= 0.5;
    }
    while rate(hi) < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::UnreachableRate(target));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    Ok((c, make(c)))
}

/// Log-spaced `δ` grid between the full-information posterior and the
/// stationary covariance, the range where `Δ = δI` is feasible and active.
pub fn default_delta_grid(model: &SystemModel, points: usize) -> Result<Vec<f64>> {
    let fi = analysis::full_information_posterior(model, &Tolerances::default())?;
    let sigma = model.stationary_stats()?.sigma;
    let lo = fi.norm() * 1.001;
    let hi = sigma.norm();
    if points < 2 || hi <= lo {
        return Ok(vec![hi.max(lo)]);
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    Ok((0..points).map(|k| (llo + (lhi - llo) * k as f64 / (points - 1) as f64).exp()).collect())
}

/// Optimized design for each target rate: nearest sweep point by average
/// rate, rescaled to hit the target exactly.
pub fn optimized_designs(model: &SystemModel, rates: &[f64], sweep: &[SweepPoint]) -> Result<Vec<OptimizedChoice>> {
    let stats = model.stationary_stats()?;
    let solved: Vec<&SweepPoint> = sweep.iter().filter(|p| p.status == SdpStatus::Optimal && p.avg_rate > 0.0).collect();
    rates
        .iter()
        .map(|&target| {
            if target >= 1.0 {
                return Err(Error::UnreachableRate(target));
            }
            let best = solved
                .iter()
                .min_by(|a, b| (a.avg_rate - target).abs().total_cmp(&(b.avg_rate - target).abs()))
                .ok_or_else(|| Error::Oracle("design sweep produced no usable point".into()))?;
            let (rescale, d) = rescale_to_rate(&stats, &best.y_blocks, target)?;
            Ok(OptimizedChoice { target_rate: target, delta: best.delta, rescale, design: d.clamped(DESIGN_CLAMP_EPS) })
        })
        .collect()
}

fn uniform_design(model: &SystemModel, stats: &StationaryStats, rate: f64) -> Result<TriggerDesign> {
    let ys: Vec<f64> = (0..model.num_sensors()).map(|i| trigger::rate_to_scalar_y(i, stats, rate)).collect::<Result<_>>()?;
    Ok(TriggerDesign::scalar_multiples(&model.sensor_dims(), &ys)?.clamped(DESIGN_CLAMP_EPS))
}

/// Runs random, uniform-stochastic and optimized-stochastic schedules at every
/// rate, plus the envelope curves of the uniform design. A rate of exactly 1
/// runs the always-transmit filter for all three schedules.
pub fn run_experiment(scenario: &Scenario, cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    let model = &scenario.model;
    if cfg.rate_grid.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
        return Err(Error::Config("rates must lie in (0, 1]".into()));
    }
    let stats = model.stationary_stats()?;
    let interior: Vec<f64> = cfg.rate_grid.iter().copied().filter(|&r| r < 1.0).collect();
    let (sweep, optimized) = if interior.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let deltas = default_delta_grid(model, cfg.delta_points)?;
        let sweep = design::sweep_designs(model, &deltas, &cfg.solver)?;
        let optimized = optimized_designs(model, &interior, &sweep)?;
        (sweep, optimized)
    };
    let tol = Tolerances::default();
    let mut points = Vec::new();
    let mut bounds = Vec::new();
    for &rate in &cfg.rate_grid {
        let run = |schedule: &Schedule, b: Option<&analysis::BoundSet>| {
            run_trials(model, schedule, cfg.trials, cfg.horizon, cfg.burn_in, cfg.master_seed, b)
        };
        if rate >= 1.0 {
            let per_trial = run(&Schedule::AlwaysTransmit, None)?;
            for kind in ScheduleKind::ALL {
                points.push(summarize(kind, rate, 1.0, cfg.horizon, per_trial.clone()));
            }
            continue;
        }
        let random = run(&Schedule::Random { rate }, None)?;
        points.push(summarize(ScheduleKind::Random, rate, rate, cfg.horizon, random));

        let uniform = uniform_design(model, &stats, rate)?;
        let env = analysis::compute_bounds(model, &uniform, &tol)?;
        let uni = summarize(
            ScheduleKind::Uniform,
            rate,
            avg_rate(&stats, &uniform),
            cfg.horizon,
            run(&Schedule::Stochastic(uniform), Some(&env))?,
        );
        bounds.push(BoundPoint {
            target_rate: rate,
            trace_x_lower: env.x_lower.trace(),
            trace_x_upper: env.x_upper.trace(),
            trace_p_bar: env.p_bar.trace(),
            trace_prior_cov: uni.trace_prior_cov,
            violations: uni.per_trial.iter().map(|s| s.bound_violations).sum(),
        });
        points.push(uni);

        let choice = optimized.iter().find(|c| c.target_rate == rate).expect("one choice per interior rate");
        let opt = run(&Schedule::Stochastic(choice.design.clone()), None)?;
        points.push(summarize(ScheduleKind::Optimized, rate, avg_rate(&stats, &choice.design), cfg.horizon, opt));
    }
    Ok(ExperimentResults { points, bounds, sweep, optimized })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementPoint {
    pub schedule: ScheduleKind,
    pub target_rate: f64,
    /// `100 (trace_random − trace_design) / trace_random`.
    pub improvement_pct: f64,
    /// Delta-method standard error using the trial pairing (common random numbers).
    pub std_error_pct: f64,
}

/// Paired standard error of `mean(a) − mean(b)` over matching trials.
pub fn paired_difference(a: &RatePoint, b: &RatePoint) -> Result<(f64, f64)> {
    if a.per_trial.len() != b.per_trial.len() {
        return Err(Error::DimensionMismatch("rate points have different trial counts".into()));
    }
    Ok(mean_and_se(a.per_trial.iter().zip(&b.per_trial).map(|(x, y)| x.trace_prior_cov - y.trace_prior_cov)))
}

/// Improvement of both stochastic designs over the random baseline.
pub fn percent_improvement(results: &ExperimentResults) -> Result<Vec<ImprovementPoint>> {
    let random = results.curve(ScheduleKind::Random);
    let mut out = Vec::new();
    for kind in [ScheduleKind::Uniform, ScheduleKind::Optimized] {
        let curve = results.curve(kind);
        if curve.len() != random.len() || curve.iter().zip(&random).any(|(a, b)| a.target_rate != b.target_rate) {
            return Err(Error::DimensionMismatch(format!("{} and random rate grids differ", kind.label())));
        }
        for (d, r) in curve.iter().zip(&random) {
            let ratio = d.trace_prior_cov / r.trace_prior_cov;
            let n = r.per_trial.len();
            let (_, se_lin) = if n == d.per_trial.len() && n > 1 {
                mean_and_se(d.per_trial.iter().zip(&r.per_trial).map(|(x, y)| x.trace_prior_cov - ratio * y.trace_prior_cov))
            } else {
                (0.0, f64::NAN)
            };
            out.push(ImprovementPoint {
                schedule: kind,
                target_rate: d.target_rate,
                improvement_pct: 100.0 * (r.trace_prior_cov - d.trace_prior_cov) / r.trace_prior_cov,
                std_error_pct: 100.0 * se_lin / r.trace_prior_cov,
            });
        }
    }
    Ok(out)
}

/// `schedule, target_rate, empirical_rate, trace_prior_cov, empirical_mse, trials, horizon`.
pub fn write_results_csv<W: Write>(out: W, results: &ExperimentResults) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["schedule", "target_rate", "empirical_rate", "trace_prior_cov", "empirical_mse", "trials", "horizon"])?;
    for p in &results.points {
        w.write_record([
            p.schedule.label().to_string(),
            p.target_rate.to_string(),
            p.empirical_rate.to_string(),
            p.trace_prior_cov.to_string(),
            p.empirical_mse.to_string(),
            p.trials.to_string(),
            p.horizon.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_improvement_csv<W: Write>(out: W, improvement: &[ImprovementPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["schedule", "target_rate", "improvement_pct", "std_error_pct"])?;
    for p in improvement {
        w.write_record([
            p.schedule.label().to_string(),
            p.target_rate.to_string(),
            p.improvement_pct.to_string(),
            p.std_error_pct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bounds_csv<W: Write>(out: W, bounds: &[BoundPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["target_rate", "trace_x_lower", "trace_x_upper", "trace_p_bar", "trace_prior_cov", "violations"])?;
    for b in bounds {
        w.write_record([
            b.target_rate.to_string(),
            b.trace_x_lower.to_string(),
            b.trace_x_upper.to_string(),
            b.trace_p_bar.to_string(),
            b.trace_prior_cov.to_string(),
            b.violations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Solves one design problem per `δ` and reports it; used for the sweep CSV.
pub fn write_sweep_csv<W: Write>(out: W, sweep: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["delta", "status", "objective", "avg_rate"])?;
    for p in sweep {
        w.write_record([p.delta.to_string(), p.status.label().to_string(), p.objective.to_string(), p.avg_rate.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_is_stable_and_positive() {
        for seed in [0, 1, 42] {
            let s = generate_datacenter_scenario(seed).unwrap();
            assert!(s.notes.spectral_radius < 1.0);
            assert!(s.model.q().cholesky().is_some());
            assert!(s.model.r().cholesky().is_some());
            assert_eq!(s.model.state_dim(), 20);
            assert_eq!(s.model.num_sensors(), 20);
            assert!(s.model.matrices().validate().is_valid());
        }
    }

    #[test]
    fn scenario_is_deterministic() {
        assert_eq!(generate_datacenter_scenario(9).unwrap(), generate_datacenter_scenario(9).unwrap());
        assert_ne!(generate_datacenter_scenario(9).unwrap().model, generate_datacenter_scenario(10).unwrap().model);
    }

    #[test]
    fn noise_magnitudes_match_targets() {
        let s = generate_datacenter_scenario(3).unwrap();
        let mut r = rng::derive(77, &[1]);
        let draws = 100_000 / 20;
        let (mut w_abs, mut v_abs) = (0.0, 0.0);
        for _ in 0..draws {
            w_abs += s.model.sample_process_noise(&mut r).iter().map(|x| x.abs()).sum::<f64>();
            v_abs += s.model.sample_measurement_noise(&mut r).iter().map(|x| x.abs()).sum::<f64>();
        }
        let n = (draws * 20) as f64;
        assert!((w_abs / n - 0.1).abs() < 0.005, "{}", w_abs / n);
        assert!((v_abs / n - 0.5).abs() < 0.025, "{}", v_abs / n);
    }

    fn small_model() -> SystemModel {
        SystemModel::new(ModelMatrices {
            a: nalgebra::dmatrix![0.9, 0.1; 0.0, 0.8],
            sensor_blocks: vec![nalgebra::dmatrix![1.0, 0.0], nalgebra::dmatrix![0.0, 1.0]],
            q: nalgebra::dmatrix![0.5, 0.1; 0.1, 0.4],
            r: nalgebra::dmatrix![1.0, 0.2; 0.2, 0.8],
            sigma0: nalgebra::dmatrix![1.0, 0.0; 0.0, 1.0],
        })
        .unwrap()
    }

    fn small_scenario() -> Scenario {
        let model = small_model();
        Scenario {
            model,
            label: "small".into(),
            notes: ScenarioNotes {
                seed: 0,
                attempts: 1,
                spectral_radius: 0.9,
                process_scale: 1.0,
                measurement_scale: 1.0,
                thermal_constants: vec![],
                leakage: vec![],
            },
        }
    }

    #[test]
    fn full_rate_point_matches_kalman_steady_state() {
        let s = small_scenario();
        let cfg = ExperimentConfig { rate_grid: vec![1.0], trials: 200, horizon: 200, burn_in: 100, master_seed: 5, ..Default::default() };
        let res = run_experiment(&s, &cfg).unwrap();
        let x_lower = numerics::riccati_fixed_point(s.model.a(), s.model.c(), s.model.q(), s.model.r(), &Tolerances::default()).unwrap();
        for kind in ScheduleKind::ALL {
            let p = res.point(kind, 1.0).unwrap();
            assert!((p.trace_prior_cov - x_lower.trace()).abs() < 1e-9);
            assert!((p.empirical_mse - x_lower.trace()).abs() < 4.0 * p.mse_std_error + 1e-9);
            assert_eq!(p.empirical_rate, 1.0);
        }
    }

    #[test]
    fn stochastic_rate_hits_target_and_curves_are_ordered() {
        let s = small_scenario();
        let cfg = ExperimentConfig {
            rate_grid: vec![0.3, 0.6],
            trials: 400,
            horizon: 300,
            burn_in: 100,
            master_seed: 11,
            delta_points: 20,
            ..Default::default()
        };
        let res = run_experiment(&s, &cfg).unwrap();
        for &rate in &cfg.rate_grid {
            for kind in ScheduleKind::ALL {
                let p = res.point(kind, rate).unwrap();
                assert!((p.empirical_rate - rate).abs() < 0.01, "{kind:?} {rate}: {}", p.empirical_rate);
                // reported covariances are honest
                assert!((p.empirical_mse - p.trace_prior_cov).abs() < 0.05 * p.trace_prior_cov);
            }
            let r = res.point(ScheduleKind::Random, rate).unwrap();
            let u = res.point(ScheduleKind::Uniform, rate).unwrap();
            let (diff, se) = paired_difference(u, r).unwrap();
            assert!(diff <= 2.0 * se, "uniform worse than random at {rate}: {diff} ± {se}");
        }
        for b in &res.bounds {
            assert_eq!(b.violations, 0);
            assert!(b.trace_x_lower <= b.trace_prior_cov && b.trace_prior_cov <= b.trace_x_upper);
        }
        for kind in ScheduleKind::ALL {
            let c = res.curve(kind);
            assert!(c[1].trace_prior_cov <= c[0].trace_prior_cov + 2.0 * c[0].trace_std_error.hypot(c[1].trace_std_error));
        }
    }

    #[test]
    fn improvement_of_identical_inputs_is_zero() {
        let s = small_scenario();
        let cfg = ExperimentConfig { rate_grid: vec![1.0], trials: 20, horizon: 150, burn_in: 100, ..Default::default() };
        let res = run_experiment(&s, &cfg).unwrap();
        for p in percent_improvement(&res).unwrap() {
            assert_eq!(p.improvement_pct, 0.0);
        }
    }

    #[test]
    fn mismatched_grids_rejected() {
        let s = small_scenario();
        let cfg = ExperimentConfig { rate_grid: vec![1.0], trials: 4, horizon: 110, burn_in: 100, ..Default::default() };
        let mut res = run_experiment(&s, &cfg).unwrap();
        res.points.retain(|p| p.schedule != ScheduleKind::Optimized);
        assert!(percent_improvement(&res).is_err());
    }

    #[test]
    fn experiment_is_reproducible() {
        let s = small_scenario();
        let cfg = ExperimentConfig { rate_grid: vec![0.5], trials: 16, horizon: 150, burn_in: 100, delta_points: 8, ..Default::default() };
        let a = run_experiment(&s, &cfg).unwrap();
        let b = run_experiment(&s, &cfg).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        write_results_csv(&mut ca, &a).unwrap();
        write_results_csv(&mut cb, &b).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn rescaling_hits_rate_exactly() {
        let model = small_model();
        let stats = model.stationary_stats().unwrap();
        let base = vec![SymMatrix::scalar(0.3), SymMatrix::scalar(1.2)];
        let (_, d) = rescale_to_rate(&stats, &base, 0.42).unwrap();
        assert!((avg_rate(&stats, &d) - 0.42).abs() < 1e-10);
    }
}
