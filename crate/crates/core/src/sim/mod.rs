//! Two-timescale orchestration.
//!
//! The fast loop interleaves one estimation step and one tracking step per
//! iteration and applies the new setpoints to the plant. The slow loop
//! periodically solves the dispatch problem with the current estimate and
//! jumps the setpoints to its solution.
//!
//! Row `k` of a trace holds `u[k]`, the measurement `y[k]` taken after
//! applying it, `e[k] = y[k] - y_star`, the estimate `phi_hat[k]` used to
//! compute `u[k]`, the mask `W[k]`, and the step size that produced
//! `phi_hat[k]` (absent when the update was skipped). Row 0 is the initial
//! measurement.

mod metrics;
mod scenario;
mod trace;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controller::{
    beta_bounds, beta_bounds_estimation, sample_mask, solve_odcp, tracking_step, ActiveConstraint,
    ControlError, ControlState, ControllerConfig, DispatchProblem, QuadraticCost,
};
use crate::estimator::{estimation_step, norm_sq, EstimatorConfig, EstimatorError, SensitivityEstimate};
use crate::net::NetError;
use crate::plant::{Plant, PlantError};
use crate::rng::{stream_rng, Stream, RNG_NAME};

pub use metrics::{classify, compute_metrics, lemma1_witness, Equilibrium, Metrics};
pub use scenario::{
    BetaRule, Injection, LineLimit, Renewables, ScalarOrVec, Scenario, ScenarioConfig, SensitivityCheck,
};
pub use trace::{export_trace, import_trace, write_trace, read_trace};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("trace header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("trace body: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed trace: {0}")]
    Trace(String),
    #[error("misaligned series: {0}")]
    Misaligned(String),
}

impl SimError {
    /// True for errors caused by the plant failing to solve.
    pub fn is_plant_failure(&self) -> bool {
        matches!(self, SimError::Plant(_))
    }
}

/// SHA-256 of the JSON encoding of `v`, hex encoded.
pub fn hash_json<T: Serialize + ?Sized>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("serializable");
    hex::encode(Sha256::digest(&bytes))
}

/// JSON has no infinity; encode non-finite values as strings.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else {
            Repr::Text(v.to_string()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Everything the loop needs, independent of how the plant was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunParams {
    pub y_star: f64,
    pub controller: ControllerConfig,
    pub estimator: EstimatorConfig,
    pub phi0: Vec<f64>,
    pub u0: Vec<f64>,
    pub seed: u64,
    /// Fast iterations between dispatch solves.
    pub slow_period: usize,
    /// Number of dispatch solves; zero runs a single estimation phase.
    pub n_slow: usize,
    /// Consecutive iterations with `|du|^2 < guard` that end a run.
    pub stall_window: usize,
    pub beta_rule: BetaRule,
    pub allow_unsafe_beta: bool,
    pub cost: QuadraticCost,
}

impl RunParams {
    /// Defaults for `n` DERs starting at `u0` with target `y_star`.
    pub fn new(y_star: f64, u0: Vec<f64>) -> Self {
        let n = u0.len();
        RunParams {
            y_star,
            controller: ControllerConfig::default(),
            estimator: EstimatorConfig::default(),
            phi0: vec![1.0; n],
            u0,
            seed: 0,
            slow_period: 600,
            n_slow: 0,
            stall_window: 50,
            beta_rule: BetaRule::Tracking,
            allow_unsafe_beta: false,
            cost: QuadraticCost::default(),
        }
    }

    /// The admissible step interval under the configured rule.
    pub fn beta_interval(&self, n: usize) -> Result<(f64, f64), ControlError> {
        let e = &self.estimator;
        match self.beta_rule {
            BetaRule::Tracking => beta_bounds(n, e.b_lo, e.b_hi, self.controller.epsilon),
            BetaRule::Estimation => beta_bounds_estimation(n, e.b_lo, e.b_hi, self.controller.epsilon),
        }
    }

    pub fn validate(&self, plant: &dyn Plant) -> Result<(), SimError> {
        let n = plant.n_inputs();
        if self.u0.len() != n || self.phi0.len() != n {
            return Err(SimError::Config(format!(
                "u0 and phi0 must have {n} entries (got {} and {})",
                self.u0.len(),
                self.phi0.len()
            )));
        }
        self.estimator.validate()?;
        let c = &self.controller;
        if !(c.beta > 0.0 && c.beta.is_finite()) {
            return Err(SimError::Config(format!("beta must be positive, got {}", c.beta)));
        }
        if !(c.delta > 0.0) {
            return Err(SimError::Config(format!("delta must be positive, got {}", c.delta)));
        }
        if self.slow_period == 0 {
            return Err(SimError::Config("slow_period must be at least 1".into()));
        }
        if self.stall_window == 0 {
            return Err(SimError::Config("stall_window must be at least 1".into()));
        }
        if !self.y_star.is_finite() {
            return Err(SimError::Config("y_star must be finite".into()));
        }
        let (lo, hi) = plant.bounds();
        for i in 0..n {
            if !(self.u0[i] >= lo[i] && self.u0[i] <= hi[i]) {
                return Err(SimError::Config(format!(
                    "u0[{i}] = {} outside [{}, {}]",
                    self.u0[i], lo[i], hi[i]
                )));
            }
        }
        if !self.allow_unsafe_beta {
            let (blo, bhi) = self.beta_interval(n)?;
            if !(c.beta > blo && c.beta < bhi) {
                return Err(SimError::Config(format!(
                    "beta = {} outside the admissible interval ({blo:.6}, {bhi:.6}); \
                     set allow_unsafe_beta to override",
                    c.beta
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Fast,
    Dispatch,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Fast => "fast",
            Phase::Dispatch => "dispatch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "init" => Some(Phase::Init),
            "fast" => Some(Phase::Fast),
            "dispatch" => Some(Phase::Dispatch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub u: Vec<f64>,
    pub y: f64,
    pub e: f64,
    pub phi_hat: Vec<f64>,
    pub w: Vec<bool>,
    pub alpha: Option<f64>,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    /// `|e| <= delta`.
    Tracked,
    /// No setpoint movement for `stall_window` iterations.
    Stalled,
    MaxIters,
    /// The plant failed to solve at row `k`; the trace stops before it.
    PlantFailure { k: usize, message: String },
}

/// Outcome of one slow-timescale solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchRecord {
    /// Row index of the setpoints that were applied (absent on failure).
    pub k: Option<usize>,
    pub p: Vec<f64>,
    pub objective: Option<f64>,
    pub active: Vec<ActiveConstraint>,
    pub flows_approx: Vec<f64>,
    pub kkt_max: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: u32,
    pub config_hash: String,
    pub feeder_hash: String,
    pub rng: String,
    pub seed: u64,
    pub n: usize,
    pub y_star: f64,
    #[serde(with = "extended_f64")]
    pub delta: f64,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub stall_window: usize,
    /// Line limits in kW; `None` for unconstrained lines.
    pub flow_limits: Vec<Option<f64>>,
    pub termination: Option<Termination>,
    pub dispatches: Vec<DispatchRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub header: TraceHeader,
    pub rows: Vec<TraceRow>,
    /// Realized line flows per row (kW); empty vectors for plants without a
    /// network. Not part of the CSV export; recompute by replay.
    pub line_flows: Vec<Vec<f64>>,
}

impl SimTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn termination(&self) -> Option<&Termination> {
        self.header.termination.as_ref()
    }

    pub fn n(&self) -> usize {
        self.header.n
    }
}

struct Runner<'a> {
    params: &'a RunParams,
    plant: &'a dyn Plant,
    lo: Vec<f64>,
    hi: Vec<f64>,
    rng: rand_chacha::ChaCha8Rng,
    state: ControlState,
    est: SensitivityEstimate,
    trace: SimTrace,
    stall: usize,
    fast_done: usize,
}

impl<'a> Runner<'a> {
    fn start(params: &'a RunParams, plant: &'a dyn Plant) -> Result<Self, SimError> {
        params.validate(plant)?;
        let (lo, hi) = plant.bounds();
        let n = plant.n_inputs();
        let m0 = plant.measure(&params.u0)?;
        let state = ControlState::new(params.u0.clone(), m0.y, params.y_star);
        let est = SensitivityEstimate::new(
            params.phi0.clone(),
            params.estimator.b_lo,
            params.estimator.b_hi,
        )?;
        let flow_limits = plant
            .network()
            .map(|(f, _)| {
                f.flow_limits()
                    .into_iter()
                    .map(|v| v.is_finite().then_some(v))
                    .collect()
            })
            .unwrap_or_default();
        let header = TraceHeader {
            format: 1,
            config_hash: hash_json(params),
            feeder_hash: plant.fingerprint(),
            rng: RNG_NAME.to_string(),
            seed: params.seed,
            n,
            y_star: params.y_star,
            delta: params.controller.delta,
            u_lo: lo.clone(),
            u_hi: hi.clone(),
            stall_window: params.stall_window,
            flow_limits,
            termination: None,
            dispatches: Vec::new(),
        };
        let row = TraceRow {
            k: 0,
            u: params.u0.clone(),
            y: m0.y,
            e: state.e,
            phi_hat: est.phi_hat().to_vec(),
            w: vec![false; n],
            alpha: None,
            phase: Phase::Init,
        };
        Ok(Runner {
            params,
            plant,
            lo,
            hi,
            rng: stream_rng(params.seed, Stream::Mask),
            state,
            est,
            trace: SimTrace {
                header,
                rows: vec![row],
                line_flows: vec![m0.line_p],
            },
            stall: 0,
            fast_done: 0,
        })
    }

    /// Runs fast iterations until termination or `budget` iterations.
    /// Returns `None` when the budget ran out first.
    fn fast(&mut self, budget: usize) -> Result<Option<Termination>, SimError> {
        let c = &self.params.controller;
        let n = self.lo.len();
        for _ in 0..budget {
            if self.state.e.abs() <= c.delta {
                return Ok(Some(Termination::Tracked));
            }
            if self.fast_done >= c.max_iters {
                return Ok(Some(Termination::MaxIters));
            }
            let du = self.state.delta_u();
            let alpha = self.params.estimator.step_size(&du);
            self.est = estimation_step(&self.est, &du, self.state.delta_y(), alpha)?;
            let mask = if c.randomized {
                sample_mask(&mut self.rng, n)
            } else {
                vec![true; n]
            };
            let u = tracking_step(&self.state.u, self.state.e, &self.est, &mask, c.beta, &self.lo, &self.hi)?;
            let k = self.state.k + 1;
            let m = match self.plant.measure(&u) {
                Ok(m) => m,
                Err(e) => {
                    return Ok(Some(Termination::PlantFailure {
                        k,
                        message: e.to_string(),
                    }))
                }
            };
            self.state.advance(u, m.y, self.params.y_star);
            self.fast_done += 1;
            self.trace.rows.push(TraceRow {
                k,
                u: self.state.u.clone(),
                y: m.y,
                e: self.state.e,
                phi_hat: self.est.phi_hat().to_vec(),
                w: mask,
                alpha: alpha.value(),
                phase: Phase::Fast,
            });
            self.trace.line_flows.push(m.line_p);
            if norm_sq(&self.state.delta_u()) < self.params.estimator.alpha_guard {
                self.stall += 1;
                if self.stall >= self.params.stall_window {
                    return Ok(Some(Termination::Stalled));
                }
            } else {
                self.stall = 0;
            }
        }
        Ok(None)
    }

    /// Solves the dispatch problem and applies its solution.
    fn dispatch(&mut self) -> Result<Option<Termination>, SimError> {
        let network = self.plant.network();
        let (flow_limits, p_d) = match network {
            Some((f, load)) => (f.flow_limits(), load.p_d.clone()),
            None => (Vec::new(), Vec::new()),
        };
        let prob = DispatchProblem {
            y_now: self.state.y,
            p_tilde: self.state.u.clone(),
            phi_hat: self.est.phi_hat().to_vec(),
            y_star: self.params.y_star,
            p_min: self.lo.clone(),
            p_max: self.hi.clone(),
            flow_limits,
            p_d,
            cost: self.params.cost.clone(),
        };
        let sol = match solve_odcp(&prob, network.map(|(f, _)| f)) {
            Ok(d) => d,
            Err(e) => {
                self.trace.header.dispatches.push(DispatchRecord {
                    k: None,
                    p: self.state.u.clone(),
                    objective: None,
                    active: Vec::new(),
                    flows_approx: Vec::new(),
                    kkt_max: None,
                    error: Some(e.to_string()),
                });
                return Ok(None);
            }
        };
        // Solver tolerance can leave the point a hair outside the box.
        let p: Vec<f64> = (0..sol.p.len())
            .map(|i| sol.p[i].clamp(self.lo[i], self.hi[i]))
            .collect();
        let k = self.state.k + 1;
        let m = match self.plant.measure(&p) {
            Ok(m) => m,
            Err(e) => {
                return Ok(Some(Termination::PlantFailure {
                    k,
                    message: e.to_string(),
                }))
            }
        };
        self.state.advance(p.clone(), m.y, self.params.y_star);
        self.stall = 0;
        self.trace.rows.push(TraceRow {
            k,
            u: p.clone(),
            y: m.y,
            e: self.state.e,
            phi_hat: self.est.phi_hat().to_vec(),
            w: vec![false; p.len()],
            alpha: None,
            phase: Phase::Dispatch,
        });
        self.trace.line_flows.push(m.line_p);
        self.trace.header.dispatches.push(DispatchRecord {
            k: Some(k),
            p,
            objective: Some(sol.objective),
            active: sol.active,
            flows_approx: sol.flows_approx,
            kkt_max: Some(sol.kkt.max()),
            error: None,
        });
        Ok(None)
    }

    fn finish(mut self, t: Termination) -> SimTrace {
        self.trace.header.termination = Some(t);
        self.trace
    }
}

/// Runs the fast loop alone until `|e| <= delta`, a stall, `max_iters`, or a
/// plant failure.
pub fn run_estimation_phase(params: &RunParams, plant: &dyn Plant) -> Result<SimTrace, SimError> {
    let mut r = Runner::start(params, plant)?;
    let t = r
        .fast(usize::MAX)?
        .expect("an unbounded budget always terminates");
    Ok(r.finish(t))
}

/// Alternates fast phases of at most `slow_period` iterations with dispatch
/// solves, `n_slow` times. `n_slow = 0` is the plain estimation phase.
///
/// Each fast phase stops early once `|e| <= delta`. A failed dispatch is
/// recorded in the header and the previous setpoints are kept. The
/// termination recorded is that of the last fast phase.
pub fn run_two_timescale(params: &RunParams, plant: &dyn Plant, n_slow: usize) -> Result<SimTrace, SimError> {
    if n_slow == 0 {
        return run_estimation_phase(params, plant);
    }
    let mut r = Runner::start(params, plant)?;
    let mut last = Termination::MaxIters;
    for _ in 0..n_slow {
        r.fast_done = 0;
        let budget = params.slow_period.min(params.controller.max_iters);
        match r.fast(budget)? {
            Some(t @ Termination::PlantFailure { .. }) => return Ok(r.finish(t)),
            Some(t) => last = t,
            None => last = Termination::MaxIters,
        }
        if let Some(t) = r.dispatch()? {
            return Ok(r.finish(t));
        }
    }
    Ok(r.finish(last))
}
