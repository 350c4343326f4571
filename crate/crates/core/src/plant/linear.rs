use serde::{Deserialize, Serialize};

use super::{Measurement, Plant, PlantError};
use crate::net::NetError;

/// Synthetic plant `y = phi^T u + c` with a box on `u`.
///
/// Lets the convergence checks run without power-flow nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPlant {
    pub phi: Vec<f64>,
    pub offset: f64,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
}

impl LinearPlant {
    pub fn new(phi: Vec<f64>, offset: f64, u_lo: Vec<f64>, u_hi: Vec<f64>) -> Result<Self, PlantError> {
        let n = phi.len();
        for len in [u_lo.len(), u_hi.len()] {
            if len != n {
                return Err(NetError::Dimension { expected: n, got: len }.into());
            }
        }
        if u_lo.iter().zip(&u_hi).any(|(l, h)| !(l <= h)) {
            return Err(PlantError::Invalid("u_lo must not exceed u_hi".into()));
        }
        Ok(LinearPlant {
            phi,
            offset,
            u_lo,
            u_hi,
        })
    }

    /// Same box `[lo, hi]` on every input.
    pub fn uniform(phi: Vec<f64>, offset: f64, lo: f64, hi: f64) -> Result<Self, PlantError> {
        let n = phi.len();
        Self::new(phi, offset, vec![lo; n], vec![hi; n])
    }

    pub fn output(&self, u: &[f64]) -> f64 {
        self.phi.iter().zip(u).map(|(p, x)| p * x).sum::<f64>() + self.offset
    }
}

impl Plant for LinearPlant {
    fn n_inputs(&self) -> usize {
        self.phi.len()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.u_lo.clone(), self.u_hi.clone())
    }

    fn measure(&self, u: &[f64]) -> Result<Measurement, PlantError> {
        if u.len() != self.phi.len() {
            return Err(NetError::Dimension {
                expected: self.phi.len(),
                got: u.len(),
            }
            .into());
        }
        Ok(Measurement {
            y: self.output(u),
            line_p: Vec::new(),
        })
    }

    fn sensitivity(&self, _u: &[f64]) -> Result<Vec<f64>, PlantError> {
        Ok(self.phi.clone())
    }

    fn fingerprint(&self) -> String {
        crate::sim::hash_json(self)
    }
}
