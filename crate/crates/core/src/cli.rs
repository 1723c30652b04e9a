//! `trigest` command-line surface: TOML config loading and subcommand dispatch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis;
use crate::design::{self, SdpProblem, SdpStatus, SolverConfig, DESIGN_CLAMP_EPS};
use crate::error::{Error, Result};
use crate::model::{ModelMatrices, SystemModel};
use crate::numerics::{self, SymMatrix, Tolerances};
use crate::oracle::{self, GridSpec};
use crate::sim::{self, ExperimentConfig, Scenario};
use crate::trigger::{self, TriggerDesign};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Dense matrix stored row-major with explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixSpec {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }

    pub fn to_matrix(&self, what: &str) -> Result<DMatrix<f64>> {
        if self.rows == 0 || self.cols == 0 || self.rows * self.cols != self.data.len() {
            return Err(Error::Config(format!(
                "{what}: {}x{} matrix needs {} entries, got {}",
                self.rows,
                self.cols,
                self.rows * self.cols,
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("{what}: entries must be finite")));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }

    fn to_sym(&self, what: &str) -> Result<SymMatrix> {
        SymMatrix::new(self.to_matrix(what)?).map_err(|e| Error::Config(format!("{what}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub c: MatrixSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub a: MatrixSpec,
    pub q: MatrixSpec,
    pub r: MatrixSpec,
    /// Defaults to the stationary covariance when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<MatrixSpec>,
    pub sensors: Vec<SensorSpec>,
}

/// The generated data-center thermal plant instead of explicit matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub datacenter_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<MatrixSpec>>,
    /// `Y⁽ⁱ⁾ = yᵢI` with every sensor at this rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform_rate: Option<f64>,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    DESIGN_CLAMP_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<MatrixSpec>,
    /// `Δ = δI`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_scalar: Option<f64>,
    #[serde(default)]
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSpec {
    pub steps: usize,
    pub grid: GridSpec,
    pub rel_tol: f64,
    pub kurtosis_tol: f64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self { steps: 3, grid: GridSpec::default(), rel_tol: 1e-4, kurtosis_tol: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<TriggerSpec>,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignSpec>,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Raw matrices, before validation.
    pub fn model_matrices(&self) -> Result<ModelMatrices> {
        match (&self.model, &self.scenario) {
            (Some(spec), None) => {
                let a = spec.a.to_matrix("model.a")?;
                let q = spec.q.to_matrix("model.q")?;
                let r = spec.r.to_matrix("model.r")?;
                let sensor_blocks = spec
                    .sensors
                    .iter()
                    .enumerate()
                    .map(|(i, s)| s.c.to_matrix(&format!("model.sensors[{i}].c")))
                    .collect::<Result<Vec<_>>>()?;
                let sigma0 = match &spec.sigma0 {
                    Some(s) => s.to_matrix("model.sigma0")?,
                    None => stationary_or_identity(&a, &q),
                };
                Ok(ModelMatrices { a, sensor_blocks, q, r, sigma0 })
            }
            (None, Some(s)) => Ok(sim::generate_datacenter_scenario(s.datacenter_seed)?.model.matrices()),
            (Some(_), Some(_)) => Err(Error::Config("give either [model] or [scenario], not both".into())),
            (None, None) => Err(Error::Config("missing [model] or [scenario] section".into())),
        }
    }

    pub fn system_model(&self) -> Result<SystemModel> {
        SystemModel::new(self.model_matrices()?)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        match &self.scenario {
            Some(s) => sim::generate_datacenter_scenario(s.datacenter_seed),
            None => {
                let model = self.system_model()?;
                Ok(Scenario { model, label: "config".into(), notes: placeholder_notes() })
            }
        }
    }

    pub fn trigger_design(&self, model: &SystemModel) -> Result<TriggerDesign> {
        let spec = self.trigger.as_ref().ok_or_else(|| Error::Config("missing [trigger] section".into()))?;
        if !(spec.eps >= 0.0) {
            return Err(Error::Config("trigger.eps must be nonnegative".into()));
        }
        match (&spec.blocks, spec.uniform_rate) {
            (Some(blocks), None) => {
                let b = blocks.iter().enumerate().map(|(i, m)| m.to_sym(&format!("trigger.blocks[{i}]"))).collect::<Result<Vec<_>>>()?;
                let d = TriggerDesign::new(b)?;
                if d.sensor_dims() != model.sensor_dims() {
                    return Err(Error::Config(format!(
                        "trigger block sizes {:?} do not match sensor sizes {:?}",
                        d.sensor_dims(),
                        model.sensor_dims()
                    )));
                }
                Ok(d)
            }
            (None, Some(rate)) => {
                let stats = model.stationary_stats()?;
                let ys = (0..model.num_sensors()).map(|i| trigger::rate_to_scalar_y(i, &stats, rate)).collect::<Result<Vec<_>>>()?;
                TriggerDesign::scalar_multiples(&model.sensor_dims(), &ys)
            }
            _ => Err(Error::Config("trigger needs exactly one of `blocks` or `uniform_rate`".into())),
        }
    }

    pub fn delta(&self, model: &SystemModel) -> Result<SymMatrix> {
        let spec = self.design.as_ref().ok_or_else(|| Error::Config("missing [design] section".into()))?;
        let n = model.state_dim();
        match (&spec.delta, spec.delta_scalar) {
            (Some(m), None) => {
                let d = m.to_sym("design.delta")?;
                if d.dim() != n {
                    return Err(Error::Config(format!("design.delta must be {n}x{n}")));
                }
                Ok(d)
            }
            (None, Some(s)) if s > 0.0 => Ok(SymMatrix::identity(n).scale(s)),
            (None, Some(_)) => Err(Error::Config("design.delta_scalar must be positive".into())),
            _ => Err(Error::Config("design needs exactly one of `delta` or `delta_scalar`".into())),
        }
    }
}

fn stationary_or_identity(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if !a.is_square() || q.shape() != (n, n) {
        return DMatrix::identity(n.max(1), n.max(1));
    }
    SymMatrix::new(q.clone())
        .and_then(|q| numerics::solve_lyapunov(a, &q))
        .map(|s| s.into_inner())
        .unwrap_or_else(|_| DMatrix::identity(n, n))
}

fn placeholder_notes() -> sim::ScenarioNotes {
    sim::ScenarioNotes {
        seed: 0,
        attempts: 0,
        spectral_radius: f64::NAN,
        process_scale: 1.0,
        measurement_scale: 1.0,
        thermal_constants: Vec::new(),
        leakage: Vec::new(),
    }
}

#[derive(Debug, Parser)]
#[command(name = "trigest", version, about = "Remote state estimation with stochastic event triggers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Master seed (overrides `experiment.master_seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the plant invariants.
    Validate(CommonArgs),
    /// Predicted communication rate of each sensor.
    Rate(CommonArgs),
    /// Riccati envelopes X̲, X̄ and worst-case posterior P̄.
    Bounds(CommonArgs),
    /// Minimum-rate trigger design subject to P̄ ⪯ Δ.
    Design(CommonArgs),
    /// Monte Carlo comparison of random, uniform and optimized schedules.
    Simulate(CommonArgs),
    /// Compare the filter with grid quadrature over every decision pattern.
    OracleCheck(CommonArgs),
}

struct Context {
    config: RunConfig,
    hash: String,
    seed: u64,
    out_dir: PathBuf,
}

impl Context {
    fn load(args: &CommonArgs) -> Result<Self> {
        let text = fs::read_to_string(&args.config).map_err(|e| Error::Config(format!("cannot read {}: {e}", args.config.display())))?;
        let mut config = RunConfig::parse(&text)?;
        if let Some(s) = args.seed {
            config.experiment.master_seed = s;
        }
        if let Some(t) = args.trials {
            config.experiment.trials = t;
        }
        if let Some(h) = args.horizon {
            config.experiment.horizon = h;
        }
        let out_dir = args.out_dir.clone().unwrap_or_else(|| config.output.dir.clone());
        let hash = Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect();
        Ok(Self { seed: config.experiment.master_seed, config, hash, out_dir })
    }

    fn header(&self) -> String {
        format!("# trigest {} config={} seed={}\n", env!("CARGO_PKG_VERSION"), self.hash, self.seed)
    }

    /// Writes `body` after the provenance comment line.
    fn write(&self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        let mut buf = self.header().into_bytes();
        body(&mut buf)?;
        let path = self.out_dir.join(name);
        fs::write(&path, buf)?;
        Ok(path)
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::InvalidModel(_)
        | Error::NonSquare { .. }
        | Error::NotSymmetric { .. }
        | Error::DimensionMismatch(_)
        | Error::Unstable { .. }
        | Error::UnreachableRate(_) => EXIT_INVALID,
        _ => EXIT_NUMERICAL,
    }
}

/// Parses `args` and runs the subcommand; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let (common, cmd): (&CommonArgs, fn(&Context) -> Result<i32>) = match &cli.command {
        Command::Validate(a) => (a, cmd_validate),
        Command::Rate(a) => (a, cmd_rate),
        Command::Bounds(a) => (a, cmd_bounds),
        Command::Design(a) => (a, cmd_design),
        Command::Simulate(a) => (a, cmd_simulate),
        Command::OracleCheck(a) => (a, cmd_oracle_check),
    };
    let result = Context::load(common).and_then(|ctx| cmd(&ctx));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn cmd_validate(ctx: &Context) -> Result<i32> {
    let matrices = ctx.config.model_matrices()?;
    let report = matrices.validate();
    print!("{report}");
    if report.is_valid() {
        println!("model valid");
        Ok(EXIT_OK)
    } else {
        for f in report.failures() {
            eprintln!("invalid: {}: {}", f.name, f.detail);
        }
        Ok(EXIT_INVALID)
    }
}

/// Rounds away float noise below 1e-12 for display.
fn tidy(v: f64) -> f64 {
    (v * 1e12).round() / 1e12
}

fn cmd_rate(ctx: &Context) -> Result<i32> {
    let model = ctx.config.system_model()?;
    let design = ctx.config.trigger_design(&model)?;
    let stats = model.stationary_stats()?;
    let rates = trigger::comm_rates(&stats, &design);
    let path = ctx.write("rates.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["sensor", "rate"])?;
        for (i, r) in rates.iter().enumerate() {
            w.write_record([i.to_string(), r.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    for (i, r) in rates.iter().enumerate() {
        println!("sensor {i}: λ = {}", tidy(*r));
    }
    println!("average rate = {}", tidy(rates.iter().sum::<f64>() / rates.len() as f64));
    println!("wrote {}", path.display());
    Ok(EXIT_OK)
}

fn write_matrix_rows(w: &mut csv::Writer<&mut Vec<u8>>, name: &str, m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_record([name.to_string(), i.to_string(), j.to_string(), m[(i, j)].to_string()])?;
        }
    }
    Ok(())
}

fn cmd_bounds(ctx: &Context) -> Result<i32> {
    let model = ctx.config.system_model()?;
    let eps = ctx.config.trigger.as_ref().map_or(DESIGN_CLAMP_EPS, |t| t.eps);
    let design = ctx.config.trigger_design(&model)?.clamped(eps);
    let b = analysis::compute_bounds(&model, &design, &Tolerances::default())?;
    let path = ctx.write("bounds.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["quantity", "row", "col", "value"])?;
        write_matrix_rows(&mut w, "x_lower", b.x_lower.as_matrix())?;
        write_matrix_rows(&mut w, "x_upper", b.x_upper.as_matrix())?;
        write_matrix_rows(&mut w, "p_bar", b.p_bar.as_matrix())?;
        w.flush()?;
        Ok(())
    })?;
    println!("trace X_lower = {}", b.x_lower.trace());
    println!("trace X_upper = {}", b.x_upper.trace());
    println!("trace P_bar   = {}", b.p_bar.trace());
    println!("wrote {}", path.display());
    Ok(EXIT_OK)
}

fn cmd_design(ctx: &Context) -> Result<i32> {
    let model = ctx.config.system_model()?;
    let delta = ctx.config.delta(&model)?;
    let solver = ctx.config.design.as_ref().map(|d| d.solver).unwrap_or_default();
    let problem = SdpProblem::new(&model, delta)?;
    let sol = design::solve_sdp(&problem, &solver)?;
    println!("status = {}", sol.status.label());
    if sol.status == SdpStatus::Infeasible {
        ctx.write("design.csv", |buf| {
            writeln!(buf, "status,{}", sol.status.label())?;
            Ok(())
        })?;
        println!("infeasible: no trigger reaches P_bar <= Delta (phase-one slack {:e})", sol.phase_one_slack);
        return Ok(EXIT_INFEASIBLE);
    }
    let report = design::verify_design(&problem, &sol)?;
    let (f_lo, g_hi) = analysis::rate_bracket(problem.pi_blocks(), &sol.y_blocks)?;
    let path = ctx.write("design.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["quantity", "row", "col", "value"])?;
        for (i, y) in sol.y_blocks.iter().enumerate() {
            write_matrix_rows(&mut w, &format!("y{i}"), y.as_matrix())?;
        }
        write_matrix_rows(&mut w, "s", sol.s.as_matrix())?;
        for (i, r) in report.rates.iter().enumerate() {
            w.write_record([format!("rate{i}"), "0".into(), "0".into(), r.to_string()])?;
        }
        w.write_record(["objective".into(), "0".into(), "0".into(), sol.objective.to_string()])?;
        w.flush()?;
        Ok(())
    })?;
    println!("objective tr(ΠY) = {}", sol.objective);
    println!("total rate = {} (bracket [{}, {}])", report.rates.iter().sum::<f64>(), f_lo, g_hi);
    println!("bound margin = {:e}, newton steps = {}", report.bound_margin, sol.newton_steps);
    if let Some(w) = &sol.warning {
        eprintln!("warning: {w}");
    }
    println!("wrote {}", path.display());
    if !report.passed() {
        for v in &report.violations {
            eprintln!("verification failed: {v}");
        }
        return Ok(EXIT_NUMERICAL);
    }
    Ok(EXIT_OK)
}

fn cmd_simulate(ctx: &Context) -> Result<i32> {
    let scenario = ctx.config.scenario()?;
    let results = sim::run_experiment(&scenario, &ctx.config.experiment)?;
    let improvement = sim::percent_improvement(&results)?;
    let written = [
        ctx.write("results.csv", |buf| sim::write_results_csv(buf, &results))?,
        ctx.write("improvement.csv", |buf| sim::write_improvement_csv(buf, &improvement))?,
        ctx.write("bounds.csv", |buf| sim::write_bounds_csv(buf, &results.bounds))?,
        ctx.write("sweep.csv", |buf| sim::write_sweep_csv(buf, &results.sweep))?,
    ];
    println!("{:<22} {:>6} {:>10} {:>12} {:>12}", "schedule", "rate", "empirical", "trace P-", "mse");
    for p in &results.points {
        println!(
            "{:<22} {:>6.2} {:>10.4} {:>12.5} {:>12.5}",
            p.schedule.label(),
            p.target_rate,
            p.empirical_rate,
            p.trace_prior_cov,
            p.empirical_mse
        );
    }
    for i in &improvement {
        println!("{:<22} {:>6.2} improvement {:>7.2}% ± {:.2}", i.schedule.label(), i.target_rate, i.improvement_pct, i.std_error_pct);
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(EXIT_OK)
}

fn cmd_oracle_check(ctx: &Context) -> Result<i32> {
    let model = ctx.config.system_model()?;
    let eps = ctx.config.trigger.as_ref().map_or(DESIGN_CLAMP_EPS, |t| t.eps);
    let design = ctx.config.trigger_design(&model)?.clamped(eps);
    let o = &ctx.config.oracle;
    let report = oracle::filter_equivalence(&model, &design, o.steps, &o.grid, ctx.seed)?;
    let passed = report.passes(o.rel_tol, o.kurtosis_tol);
    let path = ctx.write("oracle.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["patterns", "comparisons", "max_mean_rel_err", "max_cov_rel_err", "max_abs_excess_kurtosis", "passed"])?;
        w.write_record([
            report.patterns.to_string(),
            report.comparisons.to_string(),
            report.max_mean_rel_err.to_string(),
            report.max_cov_rel_err.to_string(),
            report.max_abs_excess_kurtosis.to_string(),
            passed.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    })?;
    println!("patterns = {}, comparisons = {}", report.patterns, report.comparisons);
    println!("max mean rel err = {:e}", report.max_mean_rel_err);
    println!("max cov rel err  = {:e}", report.max_cov_rel_err);
    println!("max |excess kurtosis| = {:e}", report.max_abs_excess_kurtosis);
    println!("wrote {}", path.display());
    Ok(if passed { EXIT_OK } else { EXIT_NUMERICAL })
}

/// Loads and validates a config file without running anything.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    RunConfig::parse(&text)
}
