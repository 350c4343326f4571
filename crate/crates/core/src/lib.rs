//! Data-driven coordination of distributed energy resources (DERs) on a
//! radial distribution feeder.
//!
//! The crate is organized bottom-up:
//!
//! - [`net`]: feeder data model, incidence matrix and the lossless line-flow
//!   approximation used by the dispatch problem.
//! - [`plant`]: the nonlinear ground truth. A backward/forward sweep AC power
//!   flow that maps DER set-points to the active power exchanged at the
//!   substation, plus a finite-difference sensitivity oracle.
//! - [`estimator`]: projected-gradient estimation of the sensitivity vector.
//! - [`controller`]: the randomized tracking controller and the optimal
//!   dispatch problem, solved by a null-space active-set QP.
//! - [`sim`]: the two-timescale loop, scenarios, traces and metrics.
//! - [`verify`]: executable checks of the convergence results.
//!
//! The only plant quantity the estimator and controller observe is the
//! substation exchange `y` (kW, positive when the feeder exports).

// Range checks are written as negated comparisons so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod estimator;
pub mod net;
pub mod plant;
pub mod rng;
pub mod sim;
pub mod verify;

pub use controller::{
    beta_bounds, beta_bounds_estimation, sample_mask, solve_odcp, tracking_step, ControlError,
    ControlState, ControllerConfig, Dispatch, DispatchProblem, QuadraticCost,
};
pub use estimator::{
    adaptive_alpha, estimation_step, predict_output, project_box, AlphaMode, EstimatorConfig,
    EstimatorError, SensitivityEstimate, StepSize,
};
pub use net::{
    incidence_matrix, line_flows_approx, load_feeder, map_injections, Bus, BusKind, Der,
    FeederModel, Line, NetError,
};
pub use plant::{
    fd_sensitivity, measure_output, solve_power_flow, LinearPlant, LoadProfile, OperatingPoint,
    Plant, PlantError, PowerFlowPlant, sensitivity_range,
};
pub use sim::{
    compute_metrics, run_estimation_phase, run_two_timescale, Equilibrium, Metrics, RunParams,
    ScenarioConfig, SimError, SimTrace,
};
pub use verify::{StatTestReport, Verdict};
