//! Estimators driven by the event trigger.
//!
//! [`measurement_update`] is the exact MMSE update under the stochastic trigger:
//! a Kalman update whose measurement noise is `R + (I − Ψ_k) Y⁻¹` and whose
//! innovation is `Ψ_k y_k − C x̂⁻`. A silent sensor acts like a zero-valued
//! reading corrupted by extra noise `(Y⁽ⁱ⁾)⁻¹`, so drops pull the estimate
//! toward zero. Two baselines live here as well: the plain Kalman filter and an
//! intermittent Kalman filter that ignores what a drop implies.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::SystemModel;
use crate::numerics::SymMatrix;
use crate::rng::{self, domain, Stream};
use crate::trigger::{self, DecisionVector, TriggerDesign, TriggerStreams};

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub x_prior: DVector<f64>,
    pub p_prior: SymMatrix,
    pub x_post: DVector<f64>,
    pub p_post: SymMatrix,
    /// Step index of the prior/posterior pair.
    pub k: usize,
}

impl EstimatorState {
    /// `x̂₀⁻ = 0`, `P₀⁻ = Σ₀`; the posterior fields mirror the prior until the
    /// first measurement update.
    pub fn initial(model: &SystemModel) -> Self {
        let n = model.state_dim();
        Self {
            x_prior: DVector::zeros(n),
            p_prior: model.sigma0().clone(),
            x_post: DVector::zeros(n),
            p_post: model.sigma0().clone(),
            k: 0,
        }
    }
}

/// Decisions at one step plus the received sub-vector `y_k^r`, stacked in
/// sensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionRecord {
    pub decision: DecisionVector,
    pub values: DVector<f64>,
}

impl TransmissionRecord {
    /// Keeps the blocks of `y` whose sensors transmitted.
    pub fn from_measurement(decision: DecisionVector, y: &DVector<f64>, model: &SystemModel) -> Self {
        let values: Vec<f64> = decision.transmitted().flat_map(|i| model.sensor_slice(y, i).iter().copied().collect::<Vec<_>>()).collect();
        Self { decision, values: DVector::from_vec(values) }
    }

    pub fn all_dropped(m: usize) -> Self {
        Self { decision: DecisionVector::all(m, false), values: DVector::zeros(0) }
    }

    fn check(&self, model: &SystemModel) -> Result<()> {
        if self.decision.num_sensors() != model.num_sensors() {
            return Err(Error::DimensionMismatch(format!(
                "record has {} decisions, model has {} sensors",
                self.decision.num_sensors(),
                model.num_sensors()
            )));
        }
        let expect: usize = self.decision.transmitted().map(|i| model.sensor_dim(i)).sum();
        if expect != self.values.len() {
            return Err(Error::DimensionMismatch(format!("record carries {} values, decisions imply {expect}", self.values.len())));
        }
        Ok(())
    }

    /// `Ψ_k y_k`: received values in their block positions, zeros elsewhere.
    pub fn masked_full(&self, model: &SystemModel) -> DVector<f64> {
        let mut out = DVector::zeros(model.meas_dim());
        let mut src = 0;
        for i in self.decision.transmitted() {
            let d = model.sensor_dim(i);
            out.rows_mut(model.sensor_offset(i), d).copy_from(&self.values.rows(src, d));
            src += d;
        }
        out
    }
}

/// `x̂⁻ = A x̂`, `P⁻ = A P Aᵀ + Q`; advances the step index.
pub fn time_update(state: &EstimatorState, model: &SystemModel) -> EstimatorState {
    let x_prior = model.a() * &state.x_post;
    let p_prior = state.p_post.congruence(model.a()).add(model.q());
    EstimatorState { x_post: x_prior.clone(), p_post: p_prior.clone(), x_prior, p_prior, k: state.k + 1 }
}

/// Kalman update of the prior in `state` with observation matrix `c`,
/// noise `w` and innovation `innov`.
fn kalman_correct(state: &EstimatorState, c: &DMatrix<f64>, w: DMatrix<f64>, innov: DVector<f64>) -> Result<EstimatorState> {
    let pc = state.p_prior.as_matrix() * c.transpose();
    let s = c * &pc + w;
    let chol = Cholesky::new(s).ok_or(Error::SingularInnovation)?;
    // Kᵀ = W⁻¹ C P⁻
    let kt = chol.solve(&pc.transpose());
    let x_post = &state.x_prior + kt.transpose() * innov;
    let p_post = SymMatrix::from_symmetrized(state.p_prior.as_matrix() - &pc * kt);
    Ok(EstimatorState { x_prior: state.x_prior.clone(), p_prior: state.p_prior.clone(), x_post, p_post, k: state.k })
}

/// Exact MMSE measurement update for a trigger design with cached `(Y⁽ⁱ⁾)⁻¹`.
#[derive(Debug, Clone)]
pub struct EventFilter<'m> {
    model: &'m SystemModel,
    y_inv: Vec<SymMatrix>,
}

impl<'m> EventFilter<'m> {
    /// Fails if a trigger block is singular (clamp the design first).
    pub fn new(model: &'m SystemModel, design: &TriggerDesign) -> Result<Self> {
        if design.sensor_dims() != model.sensor_dims() {
            return Err(Error::DimensionMismatch("trigger blocks do not match sensor dimensions".into()));
        }
        let y_inv = design.inverse_blocks().map_err(|_| Error::SingularInnovation)?;
        Ok(Self { model, y_inv })
    }

    /// `R + (I − Ψ) Y⁻¹`.
    pub fn effective_noise(&self, decision: &DecisionVector) -> DMatrix<f64> {
        let mut w = self.model.r().as_matrix().clone();
        for (i, &g) in decision.gamma.iter().enumerate() {
            if !g {
                let off = self.model.sensor_offset(i);
                let d = self.model.sensor_dim(i);
                let mut view = w.view_mut((off, off), (d, d));
                view += self.y_inv[i].as_matrix();
            }
        }
        w
    }

    pub fn update(&self, state: &EstimatorState, record: &TransmissionRecord) -> Result<EstimatorState> {
        record.check(self.model)?;
        let innov = record.masked_full(self.model) - self.model.c() * &state.x_prior;
        kalman_correct(state, self.model.c(), self.effective_noise(&record.decision), innov)
    }
}

/// Exact MMSE measurement update under the stochastic trigger.
pub fn measurement_update(
    state: &EstimatorState,
    model: &SystemModel,
    design: &TriggerDesign,
    record: &TransmissionRecord,
) -> Result<EstimatorState> {
    EventFilter::new(model, design)?.update(state, record)
}

/// Classical Kalman update with every sensor reporting `y`.
pub fn standard_kalman_update(state: &EstimatorState, model: &SystemModel, y: &DVector<f64>) -> Result<EstimatorState> {
    if y.len() != model.meas_dim() {
        return Err(Error::DimensionMismatch(format!("measurement has {} entries, expected {}", y.len(), model.meas_dim())));
    }
    let innov = y - model.c() * &state.x_prior;
    kalman_correct(state, model.c(), model.r().as_matrix().clone(), innov)
}

/// Kalman update using only the received sensors; a drop carries no
/// information. With nothing received the prior passes through unchanged.
pub fn intermittent_update(state: &EstimatorState, model: &SystemModel, record: &TransmissionRecord) -> Result<EstimatorState> {
    record.check(model)?;
    let rows: Vec<usize> =
        record.decision.transmitted().flat_map(|i| model.sensor_offset(i)..model.sensor_offset(i) + model.sensor_dim(i)).collect();
    if rows.is_empty() {
        return Ok(EstimatorState { x_post: state.x_prior.clone(), p_post: state.p_prior.clone(), ..state.clone() });
    }
    let c = model.c().select_rows(&rows);
    let r = model.r().as_matrix().select_rows(&rows).select_columns(&rows);
    let innov = &record.values - &c * &state.x_prior;
    kalman_correct(state, &c, r, innov)
}

/// How transmissions are decided and which estimator consumes them.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// Stochastic event trigger with the exact MMSE filter.
    Stochastic(TriggerDesign),
    /// Each sensor transmits independently with probability `rate`, handled by
    /// the intermittent Kalman filter.
    Random { rate: f64 },
    /// Every sensor transmits every step; standard Kalman filter.
    AlwaysTransmit,
    /// Every sensor is silent every step, filtered as if the silence came from
    /// the given trigger design.
    ForcedDrop(TriggerDesign),
}

impl Schedule {
    pub fn label(&self) -> &'static str {
        match self {
            Schedule::Stochastic(_) => "stochastic",
            Schedule::Random { .. } => "random",
            Schedule::AlwaysTransmit => "always",
            Schedule::ForcedDrop(_) => "forced-drop",
        }
    }
}

/// Plant and decision streams for one trial.
#[derive(Debug, Clone)]
pub struct TrialStreams {
    pub plant: Stream,
    pub decisions: TriggerStreams,
}

impl TrialStreams {
    /// Independent substreams of `master` for trial `trial` with `m` sensors.
    pub fn new(master: u64, trial: u64, m: usize) -> Self {
        Self { plant: rng::derive(master, &[domain::PLANT, trial]), decisions: TriggerStreams::new(master, &[domain::TRIGGER, trial], m) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    /// Prior and posterior at this step.
    pub state: EstimatorState,
    pub record: TransmissionRecord,
    pub x_true: DVector<f64>,
}

impl StepLog {
    pub fn squared_error(&self) -> f64 {
        (&self.x_true - &self.state.x_post).norm_squared()
    }

    pub fn prior_squared_error(&self) -> f64 {
        (&self.x_true - &self.state.x_prior).norm_squared()
    }
}

/// Lazily simulates plant, decisions and estimator, one step per item.
pub struct TrajectoryRunner<'a> {
    model: &'a SystemModel,
    schedule: &'a Schedule,
    event_filter: Option<EventFilter<'a>>,
    streams: &'a mut TrialStreams,
    x: DVector<f64>,
    state: EstimatorState,
    remaining: usize,
}

impl<'a> TrajectoryRunner<'a> {
    pub fn new(model: &'a SystemModel, schedule: &'a Schedule, horizon: usize, streams: &'a mut TrialStreams) -> Result<Self> {
        let event_filter = match schedule {
            Schedule::Stochastic(d) | Schedule::ForcedDrop(d) => Some(EventFilter::new(model, d)?),
            Schedule::Random { rate } if !(0.0..=1.0).contains(rate) => {
                return Err(Error::UnreachableRate(*rate));
            }
            _ => None,
        };
        let x = model.sample_initial_state(&mut streams.plant);
        Ok(Self { model, schedule, event_filter, streams, x, state: EstimatorState::initial(model), remaining: horizon })
    }

    fn step(&mut self) -> Result<StepLog> {
        let model = self.model;
        let m = model.num_sensors();
        let y = model.c() * &self.x + model.sample_measurement_noise(&mut self.streams.plant);
        let (post, record) = match self.schedule {
            Schedule::Stochastic(design) => {
                let decision = trigger::draw_decisions(&y, design, &mut self.streams.decisions)?;
                let record = TransmissionRecord::from_measurement(decision, &y, model);
                (self.event_filter.as_ref().expect("event filter").update(&self.state, &record)?, record)
            }
            Schedule::ForcedDrop(_) => {
                let record = TransmissionRecord::all_dropped(m);
                (self.event_filter.as_ref().expect("event filter").update(&self.state, &record)?, record)
            }
            Schedule::Random { rate } => {
                let gamma = (0..m).map(|i| self.streams.decisions.sensor(i).random::<f64>() < *rate).collect();
                let record = TransmissionRecord::from_measurement(DecisionVector { gamma }, &y, model);
                (intermittent_update(&self.state, model, &record)?, record)
            }
            Schedule::AlwaysTransmit => {
                let record = TransmissionRecord::from_measurement(DecisionVector::all(m, true), &y, model);
                (standard_kalman_update(&self.state, model, &y)?, record)
            }
        };
        let next_x = model.a() * &self.x + model.sample_process_noise(&mut self.streams.plant);
        let x_true = std::mem::replace(&mut self.x, next_x);
        self.state = time_update(&post, model);
        Ok(StepLog { state: post, record, x_true })
    }
}

impl Iterator for TrajectoryRunner<'_> {
    type Item = Result<StepLog>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let out = self.step();
        if out.is_err() {
            self.remaining = 0;
        }
        Some(out)
    }
}

/// Runs `horizon` steps and collects the full per-step log.
pub fn run_trajectory(model: &SystemModel, schedule: &Schedule, horizon: usize, streams: &mut TrialStreams) -> Result<Vec<StepLog>> {
    TrajectoryRunner::new(model, schedule, horizon, streams)?.collect()
}

/// Writes `k, gamma, trace_prior_cov, trace_post_cov, squared_error` rows.
pub fn write_trace_csv<W: Write>(out: W, steps: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "gamma", "trace_prior_cov", "trace_post_cov", "squared_error"])?;
    for s in steps {
        let gamma: String = s.record.decision.gamma.iter().map(|g| if *g { '1' } else { '0' }).collect();
        w.write_record([
            s.state.k.to_string(),
            gamma,
            format!("{:.12e}", s.state.p_prior.trace()),
            format!("{:.12e}", s.state.p_post.trace()),
            format!("{:.12e}", s.squared_error()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelMatrices;
    use crate::numerics::{min_eigenvalue, Tolerances};
    use nalgebra::dmatrix;

    fn scalar_state(x_prior: f64, p_prior: f64) -> EstimatorState {
        EstimatorState {
            x_prior: DVector::from_element(1, x_prior),
            p_prior: SymMatrix::scalar(p_prior),
            x_post: DVector::from_element(1, x_prior),
            p_post: SymMatrix::scalar(p_prior),
            k: 0,
        }
    }

    fn two_sensor_model() -> SystemModel {
        SystemModel::new(ModelMatrices {
            a: dmatrix![0.8, 0.2; -0.1, 0.6],
            sensor_blocks: vec![dmatrix![1.0, 0.0], dmatrix![0.3, 1.0; 1.0, -0.5]],
            q: dmatrix![1.0, 0.2; 0.2, 0.5],
            r: dmatrix![0.5, 0.1, 0.0; 0.1, 1.0, 0.2; 0.0, 0.2, 0.8],
            sigma0: dmatrix![2.0, 0.0; 0.0, 2.0],
        })
        .unwrap()
    }

    #[test]
    fn time_update_examples() {
        let model = SystemModel::scalar(0.0, 1.0, 0.7, 1.0, 1.0).unwrap();
        let mut s = scalar_state(3.0, 2.0);
        s.x_post[0] = 3.0;
        let t = time_update(&s, &model);
        assert_eq!(t.x_prior[0], 0.0);
        assert_eq!(t.p_prior[(0, 0)], 0.7);

        let model = SystemModel::scalar(0.5, 1.0, 1.0, 1.0, 1.0).unwrap();
        let mut s = scalar_state(0.0, 0.0);
        s.x_post[0] = 2.0;
        s.p_post = SymMatrix::scalar(1.0);
        let t = time_update(&s, &model);
        assert_eq!(t.x_prior[0], 1.0);
        assert_eq!(t.p_prior[(0, 0)], 1.25);
        assert_eq!(t.k, 1);
    }

    #[test]
    fn drop_update_matches_hand_values() {
        let model = SystemModel::scalar(0.5, 1.0, 1.0, 1.0, 1.0).unwrap();
        let design = TriggerDesign::scalar_multiples(&[1], &[1.0]).unwrap();
        let s = scalar_state(1.5, 1.0);
        let post = measurement_update(&s, &model, &design, &TransmissionRecord::all_dropped(1)).unwrap();
        // K = 1 / (1 + 1 + 1)
        assert!((post.x_post[0] - 1.0).abs() < 1e-15);
        assert!((post.p_post[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_transmit_equals_standard_kalman() {
        let model = two_sensor_model();
        let design = TriggerDesign::scalar_multiples(&[1, 2], &[0.7, 1.3]).unwrap();
        let mut s = EstimatorState::initial(&model);
        s.x_prior = DVector::from_vec(vec![0.4, -0.2]);
        let y = DVector::from_vec(vec![1.0, -0.5, 2.0]);
        let rec = TransmissionRecord::from_measurement(DecisionVector::all(2, true), &y, &model);
        let a = measurement_update(&s, &model, &design, &rec).unwrap();
        let b = standard_kalman_update(&s, &model, &y).unwrap();
        assert!((&a.x_post - &b.x_post).amax() <= 1e-12);
        assert!((a.p_post.as_matrix() - b.p_post.as_matrix()).amax() <= 1e-12);
        let c = intermittent_update(&s, &model, &rec).unwrap();
        assert!((c.x_post - &b.x_post).amax() <= 1e-12);
    }

    #[test]
    fn standard_kalman_examples() {
        let model = SystemModel::scalar(0.5, 1.0, 1.0, 1.0, 1.0).unwrap();
        let post = standard_kalman_update(&scalar_state(1.0, 1.0), &model, &DVector::from_element(1, 3.0)).unwrap();
        assert!((post.x_post[0] - 2.0).abs() < 1e-15);
        assert!((post.p_post[(0, 0)] - 0.5).abs() < 1e-15);

        let blind = SystemModel::scalar(0.5, 0.0, 1.0, 1.0, 1.0).unwrap();
        let post = standard_kalman_update(&scalar_state(1.0, 1.0), &blind, &DVector::from_element(1, 3.0)).unwrap();
        assert_eq!(post.x_post[0], 1.0);
        assert_eq!(post.p_post[(0, 0)], 1.0);
    }

    #[test]
    fn intermittent_examples() {
        let model = SystemModel::new(ModelMatrices {
            a: dmatrix![0.5],
            sensor_blocks: vec![dmatrix![1.0], dmatrix![2.0]],
            q: dmatrix![1.0],
            r: dmatrix![1.0, 0.0; 0.0, 3.0],
            sigma0: dmatrix![1.0],
        })
        .unwrap();
        let s = scalar_state(0.5, 2.0);
        let none = intermittent_update(&s, &model, &TransmissionRecord::all_dropped(2)).unwrap();
        assert_eq!(none.x_post, s.x_prior);
        assert_eq!(none.p_post, s.p_prior);

        let y = DVector::from_vec(vec![9.0, 4.0]);
        let rec = TransmissionRecord::from_measurement(DecisionVector { gamma: vec![false, true] }, &y, &model);
        let post = intermittent_update(&s, &model, &rec).unwrap();
        // sensor 2 alone: c = 2, r = 3, P⁻ = 2 → K = 4 / (8 + 3)
        let k = 4.0 / 11.0;
        assert!((post.x_post[0] - (0.5 + k * (4.0 - 1.0))).abs() < 1e-14);
        assert!((post.p_post[(0, 0)] - (2.0 - k * 2.0 * 2.0)).abs() < 1e-14);
    }

    #[test]
    fn singular_trigger_block_is_rejected() {
        let model = SystemModel::scalar(0.5, 1.0, 1.0, 1.0, 1.0).unwrap();
        let design = TriggerDesign::scalar_multiples(&[1], &[0.0]).unwrap();
        assert!(matches!(EventFilter::new(&model, &design), Err(Error::SingularInnovation)));
    }

    #[test]
    fn covariance_ordering_across_decisions() {
        let model = two_sensor_model();
        let design = TriggerDesign::scalar_multiples(&[1, 2], &[0.7, 1.3]).unwrap();
        let f = EventFilter::new(&model, &design).unwrap();
        let s = EstimatorState::initial(&model);
        let y = DVector::from_vec(vec![1.0, -0.5, 2.0]);
        let post = |bits| {
            let rec = TransmissionRecord::from_measurement(DecisionVector::from_bits(bits, 2), &y, &model);
            f.update(&s, &rec).unwrap().p_post
        };
        let tol = Tolerances::default();
        let full = post(0b11);
        let none = post(0b00);
        for bits in 0..4 {
            let p = post(bits);
            assert!(crate::numerics::loewner_le(&full, &p, &tol));
            assert!(crate::numerics::loewner_le(&p, &none, &tol));
            assert!(crate::numerics::loewner_le(&p, &s.p_prior, &tol));
        }
    }

    #[test]
    fn covariance_is_independent_of_values() {
        let model = two_sensor_model();
        let design = TriggerDesign::scalar_multiples(&[1, 2], &[0.7, 1.3]).unwrap();
        let f = EventFilter::new(&model, &design).unwrap();
        let patterns = [0b01u64, 0b11, 0b00, 0b10, 0b01];
        let run = |scale: f64| {
            let mut s = EstimatorState::initial(&model);
            let mut out = Vec::new();
            for (k, bits) in patterns.iter().enumerate() {
                let y = DVector::from_vec(vec![scale * k as f64, -scale, 2.0 * scale + 1.0]);
                let rec = TransmissionRecord::from_measurement(DecisionVector::from_bits(*bits, 2), &y, &model);
                let post = f.update(&s, &rec).unwrap();
                out.push(post.p_post.clone());
                s = time_update(&post, &model);
            }
            out
        };
        assert_eq!(run(1.0), run(-37.5));
    }

    #[test]
    fn posterior_never_exceeds_prior_along_a_run() {
        let model = two_sensor_model();
        let st = model.stationary_stats().unwrap();
        let ys: Vec<f64> = (0..2).map(|i| trigger::rate_to_scalar_y(i, &st, 0.5).unwrap()).collect();
        let design = TriggerDesign::scalar_multiples(&[1, 2], &ys).unwrap();
        let schedule = Schedule::Stochastic(design);
        let mut streams = TrialStreams::new(5, 0, 2);
        for step in run_trajectory(&model, &schedule, 500, &mut streams).unwrap() {
            assert!(min_eigenvalue(&step.state.p_prior.sub(&step.state.p_post)) >= -1e-9);
        }
    }

    #[test]
    fn always_transmit_trajectory_is_standard_kalman() {
        let model = two_sensor_model();
        let mut s1 = TrialStreams::new(8, 1, 2);
        let steps = run_trajectory(&model, &Schedule::AlwaysTransmit, 50, &mut s1).unwrap();
        let mut s2 = TrialStreams::new(8, 1, 2);
        let plant = crate::model::simulate_plant(&model, 50, &mut s2.plant);
        let mut state = EstimatorState::initial(&model);
        for (k, step) in steps.iter().enumerate() {
            let post = standard_kalman_update(&state, &model, &plant.measurements[k]).unwrap();
            assert_eq!(step.state, post);
            assert_eq!(step.x_true, plant.states[k]);
            state = time_update(&post, &model);
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let model = two_sensor_model();
        let design = TriggerDesign::scalar_multiples(&[1, 2], &[0.5, 0.5]).unwrap();
        for schedule in [Schedule::Stochastic(design.clone()), Schedule::Random { rate: 0.4 }, Schedule::ForcedDrop(design)] {
            let a = run_trajectory(&model, &schedule, 40, &mut TrialStreams::new(3, 2, 2)).unwrap();
            let b = run_trajectory(&model, &schedule, 40, &mut TrialStreams::new(3, 2, 2)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let model = two_sensor_model();
        let steps = run_trajectory(&model, &Schedule::Random { rate: 0.5 }, 5, &mut TrialStreams::new(1, 0, 2)).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &steps).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "k,gamma,trace_prior_cov,trace_post_cov,squared_error");
        assert_eq!(lines.len(), 6);
    }
}
