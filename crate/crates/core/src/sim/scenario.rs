//! TOML scenario files.
//!
//! Keys map one-to-one onto [`ScenarioConfig`] fields. `feeder_path` is
//! resolved relative to the scenario file's directory.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{RunParams, SimError};
use crate::controller::{ControllerConfig, QuadraticCost};
use crate::estimator::{AlphaMode, EstimatorConfig};
use crate::net::FeederModel;
use crate::plant::{sensitivity_range, LoadProfile, Plant, PowerFlowPlant};
use crate::rng::{stream_rng, Stream};

/// Which published step-size interval a run is validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaRule {
    /// `(eps / b_lo^2, 1 / (n b_hi^2))`.
    #[default]
    Tracking,
    /// `(eps / (n b_lo^2), 1 / (n b_hi^2))`.
    Estimation,
}

/// A scalar broadcast to every DER, or one value per DER.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ScalarOrVec {
    pub fn expand(&self, n: usize) -> Result<Vec<f64>, SimError> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(vec![*v; n]),
            ScalarOrVec::Vector(v) if v.len() == n => Ok(v.clone()),
            ScalarOrVec::Vector(v) => Err(SimError::Config(format!(
                "expected {n} values, found {}",
                v.len()
            ))),
        }
    }
}

/// Uncontrollable injection at one bus (a negative load).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub bus: usize,
    pub p_kw: f64,
    #[serde(default)]
    pub q_kvar: f64,
}

/// Uncontrollable renewables spread over buses `from_bus..=to_bus` in
/// proportion to their nominal active load, at unity power factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Renewables {
    pub total_kw: f64,
    #[serde(default = "one_usize")]
    pub from_bus: usize,
    pub to_bus: Option<usize>,
    #[serde(default)]
    pub exclude: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineLimit {
    pub line: usize,
    pub f_max_kw: f64,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn d_b_lo() -> f64 {
    0.8
}
fn d_b_hi() -> f64 {
    1.2
}
fn d_beta() -> f64 {
    0.02
}
fn d_epsilon() -> f64 {
    0.003
}
fn d_max_iters() -> usize {
    1000
}
fn d_phi0() -> ScalarOrVec {
    ScalarOrVec::Scalar(1.0)
}
fn d_seed() -> u64 {
    7
}
fn d_slow_period() -> usize {
    600
}
fn d_fast_dt() -> f64 {
    100.0
}
fn d_alpha_mode() -> String {
    "adaptive".into()
}
fn d_guard() -> f64 {
    1e-12
}
fn d_true() -> bool {
    true
}
fn d_stall() -> usize {
    50
}
fn d_fd_step() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub feeder_path: PathBuf,
    /// Multiplier on nominal loads (P and Q).
    #[serde(default = "one")]
    pub load_scale: f64,
    #[serde(default)]
    pub uncontrollable_injections: Vec<Injection>,
    #[serde(default)]
    pub renewables: Option<Renewables>,
    pub y_star: f64,
    #[serde(default = "d_b_lo")]
    pub b_lo: f64,
    #[serde(default = "d_b_hi")]
    pub b_hi: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "one")]
    pub delta: f64,
    #[serde(default = "d_max_iters")]
    pub max_iters: usize,
    #[serde(default = "d_phi0")]
    pub phi0: ScalarOrVec,
    /// Initial setpoints; defaults to each DER's lower limit.
    #[serde(default)]
    pub u0: Option<ScalarOrVec>,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_slow_period")]
    pub slow_period: usize,
    #[serde(default)]
    pub n_slow: usize,
    /// Nominal spacing of fast iterations (ms). Metadata only.
    #[serde(default = "d_fast_dt")]
    pub fast_dt_ms: f64,
    /// `"adaptive"` or `"constant"`.
    #[serde(default = "d_alpha_mode")]
    pub alpha_mode: String,
    #[serde(default = "one")]
    pub alpha_gain: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "d_guard")]
    pub alpha_guard: f64,
    #[serde(default = "d_true")]
    pub randomized: bool,
    #[serde(default = "d_stall")]
    pub stall_window: usize,
    #[serde(default)]
    pub beta_rule: BetaRule,
    #[serde(default)]
    pub allow_unsafe_beta: bool,
    #[serde(default = "d_fd_step")]
    pub fd_step_kw: f64,
    #[serde(default)]
    pub line_limits: Vec<LineLimit>,
    #[serde(default)]
    pub disconnected_ders: Vec<usize>,
    #[serde(default)]
    pub cost: QuadraticCost,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        Ok(toml::from_str(text)?)
    }

    /// Overrides one numeric parameter by name (used by parameter sweeps).
    pub fn set_param(&mut self, name: &str, value: f64) -> Result<(), SimError> {
        match name {
            "beta" => self.beta = value,
            "epsilon" => self.epsilon = value,
            "delta" => self.delta = value,
            "y_star" => self.y_star = value,
            "alpha_gain" => self.alpha_gain = value,
            "alpha" => {
                self.alpha_mode = "constant".into();
                self.alpha = Some(value);
            }
            "load_scale" => self.load_scale = value,
            "phi0" => self.phi0 = ScalarOrVec::Scalar(value),
            other => {
                return Err(SimError::Config(format!(
                    "unknown sweep parameter {other:?} (beta, epsilon, delta, y_star, alpha_gain, alpha, load_scale, phi0)"
                )))
            }
        }
        Ok(())
    }

    fn alpha(&self) -> Result<AlphaMode, SimError> {
        match self.alpha_mode.as_str() {
            "adaptive" => Ok(AlphaMode::Adaptive {
                gain: self.alpha_gain,
            }),
            "constant" => Ok(AlphaMode::Constant {
                value: self
                    .alpha
                    .ok_or_else(|| SimError::Config("constant alpha_mode needs `alpha`".into()))?,
            }),
            other => Err(SimError::Config(format!(
                "alpha_mode must be \"adaptive\" or \"constant\", found {other:?}"
            ))),
        }
    }
}

/// Outcome of [`Scenario::sensitivity_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCheck {
    pub min: f64,
    pub max: f64,
    pub within: bool,
}

/// A scenario with its feeder and loads materialized.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub feeder: FeederModel,
    pub load: LoadProfile,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let config = ScenarioConfig::from_toml(&text)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_config(config, dir)
    }

    /// Builds the scenario; a relative `feeder_path` is joined to `base_dir`.
    pub fn from_config(config: ScenarioConfig, base_dir: &Path) -> Result<Self, SimError> {
        let feeder_path = if config.feeder_path.is_absolute() {
            config.feeder_path.clone()
        } else {
            base_dir.join(&config.feeder_path)
        };
        let mut feeder = FeederModel::from_file(&feeder_path)?;
        for bus in &config.disconnected_ders {
            feeder = feeder.without_der(*bus)?;
        }
        for l in &config.line_limits {
            feeder = feeder.with_line_limit(l.line, l.f_max_kw)?;
        }
        if !(config.load_scale.is_finite() && config.load_scale >= 0.0) {
            return Err(SimError::Config("load_scale must be finite and >= 0".into()));
        }
        let mut load = LoadProfile::scaled(&feeder, config.load_scale);
        if let Some(r) = &config.renewables {
            let nominal = feeder.p_load();
            let last = r.to_bus.unwrap_or(feeder.n_buses());
            let buses: Vec<usize> = (r.from_bus.max(1)..=last.min(feeder.n_buses()))
                .filter(|b| !r.exclude.contains(b))
                .collect();
            let weight: f64 = buses.iter().map(|b| nominal[b - 1].max(0.0)).sum();
            if !(weight > 0.0) {
                return Err(SimError::Config("renewables target buses carry no load".into()));
            }
            for b in buses {
                let share = nominal[b - 1].max(0.0) / weight;
                load.inject(b, r.total_kw * share, 0.0)?;
            }
        }
        for inj in &config.uncontrollable_injections {
            load.inject(inj.bus, inj.p_kw, inj.q_kvar)?;
        }
        config.alpha()?;
        Ok(Scenario {
            config,
            feeder,
            load,
        })
    }

    pub fn plant(&self) -> Result<PowerFlowPlant, SimError> {
        Ok(PowerFlowPlant::new(self.feeder.clone(), self.load.clone())?.with_fd_step(self.config.fd_step_kw))
    }

    /// Sensitivity range over the box corners, its centre and three seeded
    /// random points, with whether it fits inside `[b_lo, b_hi]`.
    pub fn sensitivity_check(&self) -> Result<SensitivityCheck, SimError> {
        let plant = self.plant()?;
        let (lo, hi) = plant.bounds();
        let mut points = vec![
            lo.clone(),
            hi.clone(),
            lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect(),
        ];
        let mut rng = stream_rng(self.config.seed, Stream::ScenarioNoise);
        for _ in 0..3 {
            points.push(lo.iter().zip(&hi).map(|(a, b)| rng.random_range(*a..=*b)).collect());
        }
        let (min, max) = sensitivity_range(&plant, &points)?;
        Ok(SensitivityCheck {
            min,
            max,
            within: min >= self.config.b_lo && max <= self.config.b_hi,
        })
    }

    /// Run parameters, optionally with a different seed.
    pub fn run_params(&self, seed: Option<u64>) -> Result<RunParams, SimError> {
        let c = &self.config;
        let n = self.feeder.n_ders();
        let u0 = match &c.u0 {
            Some(v) => v.expand(n)?,
            None => self.feeder.der_p_min(),
        };
        Ok(RunParams {
            y_star: c.y_star,
            controller: ControllerConfig {
                beta: c.beta,
                epsilon: c.epsilon,
                randomized: c.randomized,
                delta: c.delta,
                max_iters: c.max_iters,
            },
            estimator: EstimatorConfig {
                b_lo: c.b_lo,
                b_hi: c.b_hi,
                alpha_mode: c.alpha()?,
                alpha_guard: c.alpha_guard,
            },
            phi0: c.phi0.expand(n)?,
            u0,
            seed: seed.unwrap_or(c.seed),
            slow_period: c.slow_period,
            n_slow: c.n_slow,
            stall_window: c.stall_window,
            beta_rule: c.beta_rule,
            allow_unsafe_beta: c.allow_unsafe_beta,
            cost: c.cost.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_gets_defaults() {
        let c = ScenarioConfig::from_toml("feeder_path = \"f.feeder\"\ny_star = -3000.0\n").unwrap();
        assert_eq!(c.beta, 0.02);
        assert_eq!(c.delta, 1.0);
        assert_eq!(c.seed, 7);
        assert_eq!(c.phi0, ScalarOrVec::Scalar(1.0));
        assert_eq!(c.alpha().unwrap(), AlphaMode::Adaptive { gain: 1.0 });
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(ScenarioConfig::from_toml("feeder_path = \"f\"\ny_star = 0.0\nbetta = 1.0\n").is_err());
    }

    #[test]
    fn set_param() {
        let mut c = ScenarioConfig::from_toml("feeder_path = \"f\"\ny_star = 0.0\n").unwrap();
        c.set_param("beta", 0.05).unwrap();
        assert_eq!(c.beta, 0.05);
        c.set_param("alpha", 0.001).unwrap();
        assert_eq!(c.alpha().unwrap(), AlphaMode::Constant { value: 0.001 });
        assert!(c.set_param("gamma", 1.0).is_err());
    }

    #[test]
    fn scalar_or_vec() {
        assert_eq!(ScalarOrVec::Scalar(2.0).expand(3).unwrap(), vec![2.0; 3]);
        assert!(ScalarOrVec::Vector(vec![1.0]).expand(2).is_err());
    }
}
