//! Online sensitivity estimation.
//!
//! One projected-gradient step per fast iteration on the squared prediction
//! error of the incremental model `dy = phi^T du`:
//!
//! ```text
//! phi_hat <- proj_B( phi_hat - alpha * du * (du^T phi_hat - dy) )
//! ```
//!
//! with `B = [b_lo, b_hi]^n`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Current estimate together with the box it lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEstimate {
    phi_hat: Vec<f64>,
    b_lo: f64,
    b_hi: f64,
}

impl SensitivityEstimate {
    /// Builds an estimate, projecting `phi0` into the box.
    pub fn new(phi0: Vec<f64>, b_lo: f64, b_hi: f64) -> Result<Self, EstimatorError> {
        if !(b_lo > 0.0 && b_lo <= b_hi && b_hi.is_finite()) {
            return Err(EstimatorError::Invalid(format!(
                "need 0 < b_lo <= b_hi, got [{b_lo}, {b_hi}]"
            )));
        }
        if phi0.iter().any(|v| !v.is_finite()) {
            return Err(EstimatorError::Invalid("initial estimate must be finite".into()));
        }
        let phi_hat = phi0.iter().map(|v| v.clamp(b_lo, b_hi)).collect();
        Ok(SensitivityEstimate { phi_hat, b_lo, b_hi })
    }

    pub fn phi_hat(&self) -> &[f64] {
        &self.phi_hat
    }

    pub fn b_lo(&self) -> f64 {
        self.b_lo
    }

    pub fn b_hi(&self) -> f64 {
        self.b_hi
    }

    pub fn len(&self) -> usize {
        self.phi_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi_hat.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaMode {
    /// `alpha = gain / |du|^2`. `gain = 2` is the literal rule from the
    /// convergence theorem; with it every update reflects the estimate's
    /// prediction residual instead of cancelling it. `gain = 1` cancels the
    /// residual along `du` exactly and is the default for simulations.
    Adaptive { gain: f64 },
    Constant { value: f64 },
}

impl Default for AlphaMode {
    fn default() -> Self {
        AlphaMode::Adaptive { gain: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub b_lo: f64,
    pub b_hi: f64,
    pub alpha_mode: AlphaMode,
    /// Updates are skipped when `|du|^2` falls below this (kW^2).
    pub alpha_guard: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            b_lo: 0.8,
            b_hi: 1.2,
            alpha_mode: AlphaMode::default(),
            alpha_guard: 1e-12,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.b_lo > 0.0 && self.b_lo <= self.b_hi && self.b_hi.is_finite()) {
            return Err(EstimatorError::Invalid(format!(
                "need 0 < b_lo <= b_hi, got [{}, {}]",
                self.b_lo, self.b_hi
            )));
        }
        if !(self.alpha_guard > 0.0) {
            return Err(EstimatorError::Invalid("alpha_guard must be positive".into()));
        }
        match self.alpha_mode {
            AlphaMode::Adaptive { gain } if !(gain > 0.0 && gain.is_finite()) => Err(
                EstimatorError::Invalid(format!("adaptive gain must be positive, got {gain}")),
            ),
            AlphaMode::Constant { value } if !(value > 0.0 && value.is_finite()) => Err(
                EstimatorError::Invalid(format!("constant alpha must be positive, got {value}")),
            ),
            _ => Ok(()),
        }
    }

    /// Step size for the given excitation.
    pub fn step_size(&self, delta_u: &[f64]) -> StepSize {
        match self.alpha_mode {
            AlphaMode::Adaptive { gain } => scaled_alpha(delta_u, self.alpha_guard, gain),
            AlphaMode::Constant { value } => {
                if norm_sq(delta_u) < self.alpha_guard {
                    StepSize::Skip
                } else {
                    StepSize::Step(value)
                }
            }
        }
    }
}

/// Either a step length or an instruction to leave the estimate alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepSize {
    Step(f64),
    /// No excitation this iteration.
    Skip,
}

impl StepSize {
    pub fn value(self) -> Option<f64> {
        match self {
            StepSize::Step(a) => Some(a),
            StepSize::Skip => None,
        }
    }
}

/// Euclidean projection onto the box `[lo, hi]`.
pub fn project_box(v: &[f64], lo: &[f64], hi: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    dim(v.len(), lo.len())?;
    dim(v.len(), hi.len())?;
    Ok(v.iter()
        .zip(lo.iter().zip(hi))
        .map(|(x, (l, h))| x.max(*l).min(*h))
        .collect())
}

/// `2 / |du|^2`, or [`StepSize::Skip`] when `|du|^2 < guard`.
pub fn adaptive_alpha(delta_u: &[f64], guard: f64) -> StepSize {
    scaled_alpha(delta_u, guard, 2.0)
}

/// `gain / |du|^2`, or [`StepSize::Skip`] when `|du|^2 < guard`.
pub fn scaled_alpha(delta_u: &[f64], guard: f64, gain: f64) -> StepSize {
    let nn = norm_sq(delta_u);
    if nn < guard || nn == 0.0 {
        StepSize::Skip
    } else {
        StepSize::Step(gain / nn)
    }
}

/// One projected-gradient update of the estimate.
pub fn estimation_step(
    est: &SensitivityEstimate,
    delta_u_prev: &[f64],
    delta_y_prev: f64,
    alpha: StepSize,
) -> Result<SensitivityEstimate, EstimatorError> {
    dim(est.len(), delta_u_prev.len())?;
    let StepSize::Step(alpha) = alpha else {
        return Ok(est.clone());
    };
    let residual = dot(delta_u_prev, &est.phi_hat) - delta_y_prev;
    let phi_hat = est
        .phi_hat
        .iter()
        .zip(delta_u_prev)
        .map(|(p, du)| (p - alpha * du * residual).clamp(est.b_lo, est.b_hi))
        .collect();
    Ok(SensitivityEstimate {
        phi_hat,
        b_lo: est.b_lo,
        b_hi: est.b_hi,
    })
}

/// `y_prev + phi_hat^T (u - u_prev)`.
pub fn predict_output(
    est: &SensitivityEstimate,
    y_prev: f64,
    u: &[f64],
    u_prev: &[f64],
) -> Result<f64, EstimatorError> {
    dim(est.len(), u.len())?;
    dim(est.len(), u_prev.len())?;
    Ok(y_prev
        + est
            .phi_hat
            .iter()
            .zip(u.iter().zip(u_prev))
            .map(|(p, (a, b))| p * (a - b))
            .sum::<f64>())
}

fn dim(expected: usize, got: usize) -> Result<(), EstimatorError> {
    if expected == got {
        Ok(())
    } else {
        Err(EstimatorError::Dimension { expected, got })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}
