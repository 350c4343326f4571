//! Fast-timescale tracking controller and slow-timescale dispatch.
//!
//! The tracking update is one projected-gradient step on `e^2 / 2` through
//! the estimated model, applied only to the DERs selected by a Bernoulli(1/2)
//! mask:
//!
//! ```text
//! u <- proj_U( u - beta * e * W * phi_hat )
//! ```
//!
//! The dispatch problem minimizes a separable quadratic cost subject to the
//! estimated output equality, the DER box, and line limits under the lossless
//! flow approximation.

pub mod qp;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{dot, SensitivityEstimate};
use crate::net::{line_flows_approx, FeederModel, NetError};

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("epsilon {epsilon} outside the admissible range (0, {limit})")]
    EpsilonOutOfRange { epsilon: f64, limit: f64 },
    #[error("dispatch infeasible: {0}")]
    Infeasible(String),
    #[error("dispatch unbounded: {0}")]
    Unbounded(String),
    #[error("dispatch solver hit its iteration limit")]
    IterationLimit,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

impl From<NetError> for ControlError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Dimension { expected, got } => ControlError::Dimension { expected, got },
            other => ControlError::Invalid(other.to_string()),
        }
    }
}

/// One fast-timescale iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub u: Vec<f64>,
    pub y: f64,
    /// Tracking error `y - y_star`.
    pub e: f64,
    pub u_prev: Vec<f64>,
    pub y_prev: f64,
    pub k: usize,
}

impl ControlState {
    /// Initial state: `u[-1] = u[0]`, so the first excitation is zero.
    pub fn new(u0: Vec<f64>, y0: f64, y_star: f64) -> Self {
        ControlState {
            u_prev: u0.clone(),
            u: u0,
            y: y0,
            e: y0 - y_star,
            y_prev: y0,
            k: 0,
        }
    }

    /// Records the newly applied setpoints and their measurement.
    pub fn advance(&mut self, u: Vec<f64>, y: f64, y_star: f64) {
        self.u_prev = std::mem::replace(&mut self.u, u);
        self.y_prev = self.y;
        self.y = y;
        self.e = y - y_star;
        self.k += 1;
    }

    pub fn delta_u(&self) -> Vec<f64> {
        self.u.iter().zip(&self.u_prev).map(|(a, b)| a - b).collect()
    }

    pub fn delta_y(&self) -> f64 {
        self.y - self.y_prev
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub beta: f64,
    pub epsilon: f64,
    /// Bernoulli masking on (`true`) or every DER updated each step.
    pub randomized: bool,
    /// Termination threshold on `|e|` (kW).
    pub delta: f64,
    pub max_iters: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            beta: 0.02,
            epsilon: 0.003,
            randomized: true,
            delta: 1.0,
            max_iters: 1000,
        }
    }
}

/// Draws a mask with each entry on independently with probability 1/2.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.random::<bool>()).collect()
}

/// Projected, masked gradient step on the tracking error.
pub fn tracking_step(
    u: &[f64],
    e: f64,
    est: &SensitivityEstimate,
    mask: &[bool],
    beta: f64,
    lo: &[f64],
    hi: &[f64],
) -> Result<Vec<f64>, ControlError> {
    let n = u.len();
    for len in [est.len(), mask.len(), lo.len(), hi.len()] {
        if len != n {
            return Err(ControlError::Dimension { expected: n, got: len });
        }
    }
    Ok((0..n)
        .map(|i| {
            if mask[i] {
                (u[i] - beta * e * est.phi_hat()[i]).max(lo[i]).min(hi[i])
            } else {
                u[i].max(lo[i]).min(hi[i])
            }
        })
        .collect())
}

/// Admissible control step interval `(eps / b_lo^2, 1 / (n b_hi^2))` from the
/// tracking-convergence result. Requires `0 < eps < b_lo^2 / (n b_hi^2)`.
pub fn beta_bounds(n: usize, b_lo: f64, b_hi: f64, epsilon: f64) -> Result<(f64, f64), ControlError> {
    check_box(n, b_lo, b_hi)?;
    let nf = n as f64;
    let limit = b_lo * b_lo / (nf * b_hi * b_hi);
    if !(epsilon > 0.0 && epsilon < limit) {
        return Err(ControlError::EpsilonOutOfRange { epsilon, limit });
    }
    Ok((epsilon / (b_lo * b_lo), 1.0 / (nf * b_hi * b_hi)))
}

/// The interval `(eps / (n b_lo^2), 1 / (n b_hi^2))` stated with the
/// estimation-convergence result, valid for `0 < eps < b_lo^2 / b_hi^2`.
/// Kept separate from [`beta_bounds`]; the two statements differ.
pub fn beta_bounds_estimation(
    n: usize,
    b_lo: f64,
    b_hi: f64,
    epsilon: f64,
) -> Result<(f64, f64), ControlError> {
    check_box(n, b_lo, b_hi)?;
    let nf = n as f64;
    let limit = b_lo * b_lo / (b_hi * b_hi);
    if !(epsilon > 0.0 && epsilon < limit) {
        return Err(ControlError::EpsilonOutOfRange { epsilon, limit });
    }
    Ok((epsilon / (nf * b_lo * b_lo), 1.0 / (nf * b_hi * b_hi)))
}

fn check_box(n: usize, b_lo: f64, b_hi: f64) -> Result<(), ControlError> {
    if n == 0 {
        return Err(ControlError::Invalid("need at least one DER".into()));
    }
    if !(b_lo > 0.0 && b_lo <= b_hi && b_hi.is_finite()) {
        return Err(ControlError::Invalid(format!(
            "need 0 < b_lo <= b_hi, got [{b_lo}, {b_hi}]"
        )));
    }
    Ok(())
}

/// Separable cost `sum_i w_i (p_i - r_i)^2 + l_i p_i`.
///
/// `reference = None` means `r = p_tilde`, so the default cost
/// (`w = 1`, `l = 0`) is the squared change from the current dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct QuadraticCost {
    pub weights: Option<Vec<f64>>,
    pub linear: Option<Vec<f64>>,
    pub reference: Option<Vec<f64>>,
}

impl QuadraticCost {
    /// The same cost multiplied by `s > 0`, materialized for `n` DERs.
    pub fn scaled(&self, s: f64, n: usize) -> Self {
        let scale = |v: &Option<Vec<f64>>, default: f64| {
            Some(match v {
                Some(w) => w.iter().map(|x| x * s).collect(),
                None => vec![default * s; n],
            })
        };
        QuadraticCost {
            weights: scale(&self.weights, 1.0),
            linear: scale(&self.linear, 0.0),
            reference: self.reference.clone(),
        }
    }

    fn resolve(&self, p_tilde: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), ControlError> {
        let n = p_tilde.len();
        let get = |v: &Option<Vec<f64>>, d: f64| -> Result<Vec<f64>, ControlError> {
            match v {
                None => Ok(vec![d; n]),
                Some(w) if w.len() == n => Ok(w.clone()),
                Some(w) => Err(ControlError::Dimension {
                    expected: n,
                    got: w.len(),
                }),
            }
        };
        let w = get(&self.weights, 1.0)?;
        let l = get(&self.linear, 0.0)?;
        let r = match &self.reference {
            None => p_tilde.to_vec(),
            Some(r) if r.len() == n => r.clone(),
            Some(r) => {
                return Err(ControlError::Dimension {
                    expected: n,
                    got: r.len(),
                })
            }
        };
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(ControlError::Invalid("cost weights must be finite and >= 0".into()));
        }
        if w.contains(&0.0) {
            return Err(ControlError::Unbounded(
                "zero quadratic weight; the solver needs a strictly convex cost".into(),
            ));
        }
        Ok((w, l, r))
    }

    pub fn evaluate(&self, p: &[f64], p_tilde: &[f64]) -> Result<f64, ControlError> {
        let (w, l, r) = self.resolve(p_tilde)?;
        Ok((0..p.len())
            .map(|i| w[i] * (p[i] - r[i]).powi(2) + l[i] * p[i])
            .sum())
    }
}

/// One instance of the slow-timescale dispatch problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchProblem {
    /// Measured output when the problem is posed (kW).
    pub y_now: f64,
    /// Current DER injections (kW).
    pub p_tilde: Vec<f64>,
    pub phi_hat: Vec<f64>,
    pub y_star: f64,
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
    /// Per-line limits (kW), `inf` for unconstrained lines.
    pub flow_limits: Vec<f64>,
    /// Loads used by the flow approximation (bus vector, kW).
    pub p_d: Vec<f64>,
    pub cost: QuadraticCost,
}

impl DispatchProblem {
    /// Fills the box and limits from the feeder; default cost.
    pub fn for_feeder(
        feeder: &FeederModel,
        p_d: Vec<f64>,
        y_now: f64,
        p_tilde: Vec<f64>,
        phi_hat: Vec<f64>,
        y_star: f64,
    ) -> Self {
        DispatchProblem {
            y_now,
            p_tilde,
            phi_hat,
            y_star,
            p_min: feeder.der_p_min(),
            p_max: feeder.der_p_max(),
            flow_limits: feeder.flow_limits(),
            p_d,
            cost: QuadraticCost::default(),
        }
    }

    pub fn n(&self) -> usize {
        self.p_tilde.len()
    }

    /// Right-hand side `b` of the equality `phi_hat^T p = b`.
    pub fn equality_rhs(&self) -> f64 {
        self.y_star - self.y_now + dot(&self.phi_hat, &self.p_tilde)
    }

    fn validate(&self) -> Result<(), ControlError> {
        let n = self.n();
        if n == 0 {
            return Err(ControlError::Invalid("no DERs to dispatch".into()));
        }
        for len in [self.phi_hat.len(), self.p_min.len(), self.p_max.len()] {
            if len != n {
                return Err(ControlError::Dimension { expected: n, got: len });
            }
        }
        if self.p_min.iter().zip(&self.p_max).any(|(l, h)| !(l <= h)) {
            return Err(ControlError::Invalid("p_min must not exceed p_max".into()));
        }
        if self.flow_limits.iter().any(|f| !(*f > 0.0)) {
            return Err(ControlError::Invalid("flow limits must be positive".into()));
        }
        if self.phi_hat.iter().all(|p| *p == 0.0) {
            return Err(ControlError::Invalid("phi_hat is zero".into()));
        }
        Ok(())
    }

    /// Inequalities `rows * p >= rhs`: the DER box, then both sides of every
    /// finite line limit. Lines with no DER downstream carry a constant flow
    /// and are checked here rather than passed to the solver.
    pub fn inequalities(&self, feeder: Option<&FeederModel>) -> Result<Inequalities, ControlError> {
        self.validate()?;
        let n = self.n();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rhs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let mut r = vec![0.0; n];
            r[i] = 1.0;
            rows.push(r.clone());
            rhs.push(self.p_min[i]);
            labels.push(ActiveConstraint::Lower { der: i });
            r[i] = -1.0;
            rows.push(r);
            rhs.push(-self.p_max[i]);
            labels.push(ActiveConstraint::Upper { der: i });
        }
        if let Some(feeder) = feeder {
            if feeder.n_ders() != n {
                return Err(ControlError::Dimension {
                    expected: feeder.n_ders(),
                    got: n,
                });
            }
            if self.flow_limits.len() != feeder.n_lines() {
                return Err(ControlError::Dimension {
                    expected: feeder.n_lines(),
                    got: self.flow_limits.len(),
                });
            }
            let sens = feeder.der_flow_matrix();
            let neg_load: Vec<f64> = self.p_d.iter().map(|v| -v).collect();
            let base = line_flows_approx(feeder, &neg_load)?;
            for (l, &fmax) in self.flow_limits.iter().enumerate() {
                if !fmax.is_finite() {
                    continue;
                }
                let a: Vec<f64> = sens.row(l).iter().copied().collect();
                let id = feeder.lines()[l].id;
                if a.iter().all(|v| *v == 0.0) {
                    if base[l].abs() > fmax {
                        return Err(ControlError::Infeasible(format!(
                            "line {id} carries {:.3} kW with no DER able to relieve it (limit {fmax})",
                            base[l]
                        )));
                    }
                    continue;
                }
                // f = a p + base <= fmax  and  f >= -fmax.
                rows.push(a.iter().map(|v| -v).collect());
                rhs.push(base[l] - fmax);
                labels.push(ActiveConstraint::LineMax { line: id });
                rows.push(a);
                rhs.push(-fmax - base[l]);
                labels.push(ActiveConstraint::LineMin { line: id });
            }
        }
        let m = rows.len();
        Ok(Inequalities {
            rows: DMatrix::from_fn(m, n, |r, c| rows[r][c]),
            rhs: DVector::from_vec(rhs),
            labels,
        })
    }
}

/// Linear inequalities `rows * p >= rhs` with a label per row.
#[derive(Debug, Clone)]
pub struct Inequalities {
    pub rows: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub labels: Vec<ActiveConstraint>,
}

impl Inequalities {
    /// Largest violation `max(0, rhs - row p)` over all rows.
    pub fn max_violation(&self, p: &[f64]) -> f64 {
        let pv = DVector::from_column_slice(p);
        let s = &self.rows * pv - &self.rhs;
        s.iter().fold(0.0_f64, |acc, v| acc.max(-v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActiveConstraint {
    Lower { der: usize },
    Upper { der: usize },
    /// Flow at its positive limit.
    LineMax { line: usize },
    /// Flow at its negative limit.
    LineMin { line: usize },
}

/// First-order optimality residuals in the original variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `|grad c - nu phi_hat - sum lambda_i a_i|`, relative to the gradient scale.
    pub stationarity: f64,
    /// `|phi_hat^T p - b|`, relative to `max(1, |b|)`.
    pub equality: f64,
    /// Largest inequality violation, relative to the row's right-hand side.
    pub inequality: f64,
    /// Magnitude of the most negative inequality multiplier.
    pub dual: f64,
    /// Largest `|lambda_i * slack_i|`.
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.equality)
            .max(self.inequality)
            .max(self.dual)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub p: Vec<f64>,
    pub objective: f64,
    pub kkt: KktReport,
    pub active: Vec<ActiveConstraint>,
    /// Approximate line flows at the solution (empty without a feeder).
    pub flows_approx: Vec<f64>,
    pub iterations: usize,
}

/// Solves the dispatch problem. Line limits are enforced only when a feeder
/// is supplied.
pub fn solve_odcp(prob: &DispatchProblem, feeder: Option<&FeederModel>) -> Result<Dispatch, ControlError> {
    let ineq = prob.inequalities(feeder)?;
    let n = prob.n();
    let (w, l, r) = prob.cost.resolve(&prob.p_tilde)?;
    let g = DMatrix::from_diagonal(&DVector::from_iterator(n, w.iter().map(|x| 2.0 * x)));
    let a = DVector::from_iterator(n, (0..n).map(|i| l[i] - 2.0 * w[i] * r[i]));
    let c = DVector::from_column_slice(&prob.phi_hat);
    let b = prob.equality_rhs();
    let sol = qp::solve(&qp::QpProblem {
        g: &g,
        a: &a,
        c: &c,
        b,
        cin: &ineq.rows,
        din: &ineq.rhs,
    })
    .map_err(|e| match e {
        qp::QpError::Infeasible(row) => ControlError::Infeasible(match row {
            Some(j) => format!(
                "target {} kW unreachable; blocking constraint {:?}",
                prob.y_star, ineq.labels[j]
            ),
            None => format!("target {} kW unreachable", prob.y_star),
        }),
        qp::QpError::NotConvex => ControlError::Unbounded("reduced Hessian not positive definite".into()),
        qp::QpError::IterationLimit => ControlError::IterationLimit,
    })?;

    let p: Vec<f64> = sol.x.iter().copied().collect();
    let grad = &g * &sol.x + &a;
    let resid = &grad - &c * sol.nu - ineq.rows.transpose() * &sol.lambda;
    let scale = 1.0 + grad.amax().max((&g * &sol.x).amax()).max(a.amax());
    let slack = &ineq.rows * &sol.x - &ineq.rhs;
    let mut inequality: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for j in 0..slack.len() {
        inequality = inequality.max(-slack[j] / (1.0 + ineq.rhs[j].abs()));
        complementarity = complementarity.max((sol.lambda[j] * slack[j]).abs() / scale);
    }
    let kkt = KktReport {
        stationarity: resid.amax() / scale,
        equality: (c.dot(&sol.x) - b).abs() / (1.0 + b.abs()),
        inequality,
        dual: sol.lambda.iter().fold(0.0_f64, |acc, v| acc.max(-v)),
        complementarity,
    };
    let flows_approx = match feeder {
        Some(f) => {
            let inj = crate::net::map_injections(f, &p, &prob.p_d)?;
            line_flows_approx(f, &inj)?
        }
        None => Vec::new(),
    };
    Ok(Dispatch {
        objective: prob.cost.evaluate(&p, &prob.p_tilde)?,
        p,
        kkt,
        active: sol.active.iter().map(|&j| ineq.labels[j]).collect(),
        flows_approx,
        iterations: sol.iterations,
    })
}
