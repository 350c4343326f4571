//! Nonlinear plant: AC power flow on a radial feeder.
//!
//! The solver is a backward/forward sweep on bus currents with constant-power
//! loads. Constant-voltage DERs are handled by an outer loop that adjusts
//! their reactive injections with a Broyden (multivariate secant) update on
//! the voltage-magnitude mismatch. The Jacobian guess for that loop is the
//! common-path reactance matrix, which is exact for a lossless linearized
//! feeder.

mod linear;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{BusKind, FeederModel, NetError};

pub use linear::LinearPlant;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("power flow did not converge after {iterations} sweeps (last max |dV| = {residual:.3e} pu)")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("constant-voltage DER at bus {bus} needs {q_kvar:.1} kVAr, outside [{q_min:.1}, {q_max:.1}]")]
    ReactiveLimit {
        bus: usize,
        q_kvar: f64,
        q_min: f64,
        q_max: f64,
    },
    #[error("setpoint {value} kW for DER {index} outside [{lo}, {hi}]")]
    OutOfBounds {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Loads seen by the plant, uncontrollable renewables included as negative
/// entries. Bus vectors of length `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub p_d: Vec<f64>,
    pub q_d: Vec<f64>,
}

impl LoadProfile {
    /// The feeder's nominal loads.
    pub fn nominal(feeder: &FeederModel) -> Self {
        LoadProfile {
            p_d: feeder.p_load(),
            q_d: feeder.q_load(),
        }
    }

    /// Nominal loads multiplied by `scale` (both P and Q).
    pub fn scaled(feeder: &FeederModel, scale: f64) -> Self {
        let mut lp = Self::nominal(feeder);
        lp.p_d.iter_mut().for_each(|v| *v *= scale);
        lp.q_d.iter_mut().for_each(|v| *v *= scale);
        lp
    }

    /// Adds an uncontrollable injection (negative load) at `bus`.
    pub fn inject(&mut self, bus: usize, p_kw: f64, q_kvar: f64) -> Result<(), PlantError> {
        if bus == 0 || bus > self.p_d.len() {
            return Err(PlantError::Invalid(format!("no bus {bus} to inject at")));
        }
        self.p_d[bus - 1] -= p_kw;
        self.q_d[bus - 1] -= q_kvar;
        Ok(())
    }

    pub fn total_p(&self) -> f64 {
        self.p_d.iter().sum()
    }

    fn check(&self, feeder: &FeederModel) -> Result<(), PlantError> {
        let n = feeder.n_buses();
        if self.p_d.len() != n || self.q_d.len() != n {
            return Err(NetError::Dimension {
                expected: n,
                got: self.p_d.len().min(self.q_d.len()),
            }
            .into());
        }
        if self.p_d.iter().chain(&self.q_d).any(|v| !v.is_finite()) {
            return Err(PlantError::Invalid("non-finite load".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// Sweep cap for one inner solve (fixed reactive injections).
    pub max_sweeps: usize,
    /// Inner convergence threshold on max |dV| (pu).
    pub tol_v: f64,
    /// Cap on reactive-power corrections for constant-voltage DERs.
    pub max_outer: usize,
    /// Voltage-magnitude tolerance at constant-voltage buses (pu).
    pub tol_pv: f64,
    /// Acceptance threshold on the final bus power mismatch (pu).
    pub tol_mismatch: f64,
    /// Permit setpoints outside the DER box (finite-difference stencils).
    pub allow_out_of_box: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            max_sweeps: 100,
            tol_v: 1e-12,
            max_outer: 50,
            tol_pv: 1e-11,
            tol_mismatch: 1e-8,
            allow_out_of_box: false,
        }
    }
}

/// A solved AC operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Voltage magnitudes (pu) indexed by bus id, substation included.
    pub v_mag: Vec<f64>,
    /// Voltage angles (rad) indexed by bus id.
    pub v_ang: Vec<f64>,
    /// Substation exchange (kW), positive when the feeder exports.
    pub y: f64,
    /// Realized DER reactive injections (kVAr), one per DER.
    pub q_der: Vec<f64>,
    /// Active flow at each line's `from` end, in its reference direction (kW).
    pub line_p: Vec<f64>,
    /// Total series losses (kW).
    pub losses_kw: f64,
    /// Largest bus power mismatch of the final solution (pu).
    pub mismatch_pu: f64,
    /// Total sweeps performed across all outer iterations.
    pub sweeps: usize,
}

/// Solves the AC power flow with default options.
pub fn solve_power_flow(
    feeder: &FeederModel,
    u: &[f64],
    pi: &LoadProfile,
) -> Result<OperatingPoint, PlantError> {
    solve_power_flow_with(feeder, u, pi, &SweepOptions::default())
}

pub fn solve_power_flow_with(
    feeder: &FeederModel,
    u: &[f64],
    pi: &LoadProfile,
    opts: &SweepOptions,
) -> Result<OperatingPoint, PlantError> {
    pi.check(feeder)?;
    if u.len() != feeder.n_ders() {
        return Err(NetError::Dimension {
            expected: feeder.n_ders(),
            got: u.len(),
        }
        .into());
    }
    if !opts.allow_out_of_box {
        for (i, (d, &v)) in feeder.ders().iter().zip(u).enumerate() {
            let slack = 1e-9 * (1.0 + d.p_max_kw.abs());
            if !(v >= d.p_min_kw - slack && v <= d.p_max_kw + slack) {
                return Err(PlantError::OutOfBounds {
                    index: i,
                    value: v,
                    lo: d.p_min_kw,
                    hi: d.p_max_kw,
                });
            }
        }
    }
    let mut solver = Sweep::new(feeder, u, pi);
    solver.run(opts)
}

/// Working state of one solve. Bus-indexed arrays have length `N + 1`.
struct Sweep<'a> {
    feeder: &'a FeederModel,
    s_base: f64,
    z: Vec<Complex64>,
    s_spec: Vec<Complex64>,
    v: Vec<Complex64>,
    j: Vec<Complex64>,
    /// (bus, DER index, set-point) per constant-voltage DER.
    pv: Vec<(usize, usize, f64)>,
    q_pv: Vec<f64>,
    sweeps: usize,
}

impl<'a> Sweep<'a> {
    fn new(feeder: &'a FeederModel, u: &[f64], pi: &LoadProfile) -> Self {
        let nb = feeder.n_buses() + 1;
        let s_base = feeder.base().s_base_kva;
        let mut z = vec![Complex64::new(0.0, 0.0); nb];
        for b in 1..nb {
            let l = &feeder.lines()[feeder.parent_line(b).expect("non-root bus")];
            z[b] = Complex64::new(l.r_pu, l.x_pu);
        }
        let mut s_spec = vec![Complex64::new(0.0, 0.0); nb];
        for b in 1..nb {
            s_spec[b] = Complex64::new(-pi.p_d[b - 1], -pi.q_d[b - 1]) / s_base;
        }
        let mut pv = Vec::new();
        for (i, (d, &p)) in feeder.ders().iter().zip(u).enumerate() {
            s_spec[d.bus] += Complex64::new(p / s_base, 0.0);
            let bus = &feeder.buses()[d.bus];
            if bus.kind == BusKind::DerConstVoltage {
                pv.push((d.bus, i, bus.v_set_pu.expect("validated")));
            }
        }
        let v0 = Complex64::new(feeder.v_source(), 0.0);
        Sweep {
            feeder,
            s_base,
            z,
            s_spec,
            v: vec![v0; nb],
            j: vec![Complex64::new(0.0, 0.0); nb],
            q_pv: vec![0.0; pv.len()],
            pv,
            sweeps: 0,
        }
    }

    fn injection(&self, b: usize) -> Complex64 {
        let mut s = self.s_spec[b];
        for (k, &(bus, _, _)) in self.pv.iter().enumerate() {
            if bus == b {
                s += Complex64::new(0.0, self.q_pv[k]);
            }
        }
        s
    }

    /// Sweeps until the voltage update stalls, with fixed reactive injections.
    fn inner(&mut self, opts: &SweepOptions) -> Result<(), PlantError> {
        let order = self.feeder.order();
        let s: Vec<Complex64> = (0..self.v.len()).map(|b| self.injection(b)).collect();
        let mut last = f64::INFINITY;
        for _ in 0..opts.max_sweeps {
            self.sweeps += 1;
            self.j.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for &b in order.iter().rev() {
                if b == 0 {
                    continue;
                }
                // Current drawn from the network by the bus, then aggregated
                // into the line feeding it.
                let inj = (s[b] / self.v[b]).conj();
                self.j[b] -= inj;
                let p = self.feeder.parent(b).expect("non-root bus");
                if p != 0 {
                    let jb = self.j[b];
                    self.j[p] += jb;
                }
            }
            let mut dv: f64 = 0.0;
            for &b in order.iter().skip(1) {
                let p = self.feeder.parent(b).expect("non-root bus");
                let nv = self.v[p] - self.z[b] * self.j[b];
                dv = dv.max((nv - self.v[b]).norm());
                self.v[b] = nv;
            }
            if !dv.is_finite() {
                break;
            }
            last = dv;
            if dv < opts.tol_v {
                return Ok(());
            }
        }
        Err(PlantError::NonConvergence {
            iterations: self.sweeps,
            residual: last,
        })
    }

    fn pv_mismatch(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.pv.len(),
            self.pv.iter().map(|&(b, _, vs)| vs - self.v[b].norm()),
        )
    }

    /// Reactance of the path shared by the routes from two buses to the root.
    fn common_reactance(&self) -> DMatrix<f64> {
        let k = self.pv.len();
        let path = |mut b: usize| {
            let mut set = Vec::new();
            while b != 0 {
                set.push(b);
                b = self.feeder.parent(b).expect("non-root bus");
            }
            set
        };
        let paths: Vec<Vec<usize>> = self.pv.iter().map(|&(b, _, _)| path(b)).collect();
        DMatrix::from_fn(k, k, |r, c| {
            paths[r]
                .iter()
                .filter(|b| paths[c].contains(b))
                .map(|&b| self.z[b].im)
                .sum()
        })
    }

    fn run(&mut self, opts: &SweepOptions) -> Result<OperatingPoint, PlantError> {
        self.inner(opts)?;
        if !self.pv.is_empty() {
            let x0 = self.common_reactance();
            let mut jac = x0.clone();
            let mut mis = self.pv_mismatch();
            let mut converged = false;
            let mut wanted = vec![0.0; self.pv.len()];
            for _ in 0..opts.max_outer {
                if mis.amax() < opts.tol_pv {
                    converged = true;
                    break;
                }
                // A rank-one update can make the estimate singular; restart
                // from the reactance model when it does.
                let dq = match jac.clone().lu().solve(&mis) {
                    Some(dq) if dq.iter().all(|v| v.is_finite()) => dq,
                    _ => {
                        jac = x0.clone();
                        jac.clone()
                            .lu()
                            .solve(&mis)
                            .ok_or_else(|| PlantError::Invalid("singular reactive update".into()))?
                    }
                };
                let q_old = DVector::from_vec(self.q_pv.clone());
                for (k, &(_, idx, _)) in self.pv.iter().enumerate() {
                    let d = &self.feeder.ders()[idx];
                    let want = self.q_pv[k] + dq[k];
                    self.q_pv[k] = want.clamp(d.q_min_kvar / self.s_base, d.q_max_kvar / self.s_base);
                    wanted[k] = want;
                }
                let step = DVector::from_vec(self.q_pv.clone()) - q_old;
                self.inner(opts)?;
                let new_mis = self.pv_mismatch();
                // Broyden update of d|V|/dq from the observed change.
                let dv = &mis - &new_mis;
                let ss = step.dot(&step);
                if ss > 0.0 {
                    let corr = (dv - &jac * &step) / ss;
                    jac += corr * step.transpose();
                }
                mis = new_mis;
            }
            if !converged && mis.amax() >= opts.tol_pv {
                for (k, &(bus, idx, _)) in self.pv.iter().enumerate() {
                    let d = &self.feeder.ders()[idx];
                    let q = wanted[k] * self.s_base;
                    if q < d.q_min_kvar || q > d.q_max_kvar {
                        return Err(PlantError::ReactiveLimit {
                            bus,
                            q_kvar: q,
                            q_min: d.q_min_kvar,
                            q_max: d.q_max_kvar,
                        });
                    }
                }
                return Err(PlantError::NonConvergence {
                    iterations: self.sweeps,
                    residual: mis.amax(),
                });
            }
        }
        self.finish(opts)
    }

    fn finish(&self, opts: &SweepOptions) -> Result<OperatingPoint, PlantError> {
        let feeder = self.feeder;
        let nb = self.v.len();
        // Line currents from KVL on the final voltages, then bus balance.
        let mut i_line = vec![Complex64::new(0.0, 0.0); nb];
        for b in 1..nb {
            let p = feeder.parent(b).expect("non-root bus");
            let z = self.z[b];
            i_line[b] = if z.norm() > 0.0 {
                (self.v[p] - self.v[b]) / z
            } else {
                self.j[b]
            };
        }
        let mut net_in = i_line.clone();
        for b in 1..nb {
            let p = feeder.parent(b).expect("non-root bus");
            net_in[p] -= i_line[b];
        }
        let mut mismatch: f64 = 0.0;
        for (b, inflow) in net_in.iter().enumerate().skip(1) {
            // Power the bus draws from the network must equal -S_spec.
            let drawn = self.v[b] * inflow.conj();
            mismatch = mismatch.max((drawn + self.injection(b)).norm());
        }
        if !(mismatch < opts.tol_mismatch) {
            return Err(PlantError::NonConvergence {
                iterations: self.sweeps,
                residual: mismatch,
            });
        }
        let root_current: Complex64 = (1..nb)
            .filter(|&b| feeder.parent(b) == Some(0))
            .map(|b| i_line[b])
            .sum();
        let y = -(self.v[0] * root_current.conj()).re * self.s_base;
        let mut line_p = vec![0.0; feeder.n_lines()];
        let mut losses = 0.0;
        for b in 1..nb {
            let idx = feeder.parent_line(b).expect("non-root bus");
            let p = feeder.parent(b).expect("non-root bus");
            let sent = (self.v[p] * i_line[b].conj()).re * self.s_base;
            let received = (self.v[b] * i_line[b].conj()).re * self.s_base;
            line_p[idx] = if feeder.line_points_downstream(idx) {
                sent
            } else {
                -received
            };
            losses += self.z[b].re * i_line[b].norm_sqr() * self.s_base;
        }
        let mut q_der = vec![0.0; feeder.n_ders()];
        for (k, &(_, idx, _)) in self.pv.iter().enumerate() {
            q_der[idx] = self.q_pv[k] * self.s_base;
        }
        Ok(OperatingPoint {
            v_mag: self.v.iter().map(|v| v.norm()).collect(),
            v_ang: self.v.iter().map(|v| v.arg()).collect(),
            y,
            q_der,
            line_p,
            losses_kw: losses,
            mismatch_pu: mismatch,
            sweeps: self.sweeps,
        })
    }
}

/// The substation exchange of a solved operating point. This is the only
/// plant quantity the estimator and controller are allowed to see.
pub fn measure_output(op: &OperatingPoint) -> f64 {
    op.y
}

/// Finite-difference sensitivity `dy/du` at `u`.
///
/// Central differences where `u_i +- h` stays inside the DER box. At a box
/// edge the one-sided second-order stencil `(-3 y0 + 4 y1 - y2) / 2h` into
/// the box is used instead. The `2n` solves run in parallel.
pub fn fd_sensitivity(
    feeder: &FeederModel,
    u: &[f64],
    pi: &LoadProfile,
    h_step: f64,
) -> Result<Vec<f64>, PlantError> {
    if !(h_step > 0.0) {
        return Err(PlantError::Invalid(format!("h_step must be positive, got {h_step}")));
    }
    let ders = feeder.ders();
    if u.len() != ders.len() {
        return Err(NetError::Dimension {
            expected: ders.len(),
            got: u.len(),
        }
        .into());
    }
    let stencils: Vec<Vec<(f64, f64)>> = ders
        .iter()
        .zip(u)
        .map(|(d, &ui)| {
            let narrow = d.p_max_kw - d.p_min_kw < 2.0 * h_step;
            if !narrow && ui - h_step < d.p_min_kw {
                vec![(0.0, -1.5), (h_step, 2.0), (2.0 * h_step, -0.5)]
            } else if !narrow && ui + h_step > d.p_max_kw {
                vec![(0.0, 1.5), (-h_step, -2.0), (-2.0 * h_step, 0.5)]
            } else {
                vec![(h_step, 0.5), (-h_step, -0.5)]
            }
        })
        .collect();
    let jobs: Vec<(usize, f64, f64)> = stencils
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.iter().map(move |&(off, w)| (i, off, w)))
        .collect();
    // A box narrower than the stencil is probed outside its limits.
    let opts = SweepOptions {
        allow_out_of_box: true,
        ..SweepOptions::default()
    };
    let values: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, off, _)| {
            let mut x = u.to_vec();
            x[i] += off;
            solve_power_flow_with(feeder, &x, pi, &opts).map(|op| op.y)
        })
        .collect::<Result<_, _>>()?;
    let mut phi = vec![0.0; u.len()];
    for (&(i, _, w), y) in jobs.iter().zip(values) {
        phi[i] += w * y / h_step;
    }
    Ok(phi)
}

/// Smallest and largest sensitivity component over the sample points.
///
/// Used to flag plants whose sensitivities leave the box the estimator
/// assumes; the loop itself never calls it.
pub fn sensitivity_range(plant: &dyn Plant, points: &[Vec<f64>]) -> Result<(f64, f64), PlantError> {
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    for u in points {
        for v in plant.sensitivity(u)? {
            range = (range.0.min(v), range.1.max(v));
        }
    }
    Ok(range)
}

/// A plant the estimator/controller loop can drive.
pub trait Plant: Sync {
    /// Number of controllable inputs `n`.
    fn n_inputs(&self) -> usize;

    /// Box `[u_lo, u_hi]` the controls must stay in.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);

    /// Applies `u` and measures the substation exchange.
    fn measure(&self, u: &[f64]) -> Result<Measurement, PlantError>;

    /// The true sensitivity at `u`; used only as a test oracle.
    fn sensitivity(&self, u: &[f64]) -> Result<Vec<f64>, PlantError>;

    /// Stable identifier of the plant data, recorded in trace headers.
    fn fingerprint(&self) -> String;

    /// Feeder and loads when the plant is a network, for the dispatch layer.
    fn network(&self) -> Option<(&FeederModel, &LoadProfile)> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub y: f64,
    /// Realized line flows (kW); empty when the plant has no network.
    pub line_p: Vec<f64>,
}

/// The AC power-flow plant.
#[derive(Debug, Clone)]
pub struct PowerFlowPlant {
    feeder: FeederModel,
    load: LoadProfile,
    h_step: f64,
    fingerprint: String,
}

impl PowerFlowPlant {
    pub fn new(feeder: FeederModel, load: LoadProfile) -> Result<Self, PlantError> {
        load.check(&feeder)?;
        let fingerprint = crate::sim::hash_json(&(&feeder, &load));
        Ok(PowerFlowPlant {
            feeder,
            load,
            h_step: 0.1,
            fingerprint,
        })
    }

    /// Finite-difference step for the sensitivity oracle (kW).
    pub fn with_fd_step(mut self, h: f64) -> Self {
        self.h_step = h;
        self
    }

    pub fn feeder(&self) -> &FeederModel {
        &self.feeder
    }

    pub fn load(&self) -> &LoadProfile {
        &self.load
    }

    pub fn solve(&self, u: &[f64]) -> Result<OperatingPoint, PlantError> {
        solve_power_flow(&self.feeder, u, &self.load)
    }
}

impl Plant for PowerFlowPlant {
    fn n_inputs(&self) -> usize {
        self.feeder.n_ders()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.feeder.der_p_min(), self.feeder.der_p_max())
    }

    fn measure(&self, u: &[f64]) -> Result<Measurement, PlantError> {
        let op = self.solve(u)?;
        Ok(Measurement {
            y: measure_output(&op),
            line_p: op.line_p,
        })
    }

    fn sensitivity(&self, u: &[f64]) -> Result<Vec<f64>, PlantError> {
        fd_sensitivity(&self.feeder, u, &self.load, self.h_step)
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn network(&self) -> Option<(&FeederModel, &LoadProfile)> {
        Some((&self.feeder, &self.load))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::testing::*;
    use crate::net::{Base, Der};
    use approx::assert_relative_eq;

    fn two_bus(r: f64, x: f64, load_kw: f64) -> FeederModel {
        let buses = vec![
            bus(0, BusKind::Substation, 0.0, 0.0),
            bus(1, BusKind::DerUnityPf, load_kw, 0.0),
        ];
        FeederModel::new(
            buses,
            vec![line(1, 0, 1, r, x)],
            vec![der(1, 0.0, 100.0)],
            Base::default(),
        )
        .unwrap()
    }

    #[test]
    fn lossless_two_bus() {
        let f = two_bus(0.0, 0.0, 100.0);
        let op = solve_power_flow(&f, &[0.0], &LoadProfile::nominal(&f)).unwrap();
        assert_relative_eq!(op.y, -100.0, epsilon = 1e-9);
        assert_relative_eq!(op.v_mag[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_bus_matches_closed_form() {
        // Load of 1 pu through r = 0.01: V^2 - V + r P = 0, I = P / V.
        let r = 0.01;
        let f = two_bus(r, 0.0, 1000.0);
        let op = solve_power_flow(&f, &[0.0], &LoadProfile::nominal(&f)).unwrap();
        let v1 = (1.0 + (1.0 - 4.0 * r).sqrt()) / 2.0;
        let loss = r * (1.0 / v1).powi(2);
        assert_relative_eq!(op.v_mag[1], v1, epsilon = 1e-10);
        assert_relative_eq!(op.y, -(1.0 + loss) * 1000.0, epsilon = 1e-7);
        assert!(op.y < -1000.0);
    }

    #[test]
    fn reversed_line_reports_from_end_flow() {
        let buses = vec![
            bus(0, BusKind::Substation, 0.0, 0.0),
            bus(1, BusKind::Load, 100.0, 0.0),
        ];
        let f = FeederModel::new(buses, vec![line(1, 1, 0, 0.001, 0.001)], vec![], Base::default())
            .unwrap();
        let op = solve_power_flow(&f, &[], &LoadProfile::nominal(&f)).unwrap();
        // From end is bus 1, so the flow in the reference direction is
        // minus what reaches bus 1.
        assert_relative_eq!(op.line_p[0], -100.0, epsilon = 1e-8);
    }

    #[test]
    fn out_of_box_setpoint_is_rejected() {
        let f = two_bus(0.0, 0.0, 100.0);
        let err = solve_power_flow(&f, &[150.0], &LoadProfile::nominal(&f)).unwrap_err();
        assert!(matches!(err, PlantError::OutOfBounds { .. }));
    }

    #[test]
    fn collapse_is_reported() {
        // 1 pu through r = 0.3 has no real solution (1 - 4 r P < 0).
        let f = two_bus(0.3, 0.0, 1000.0);
        let err = solve_power_flow(&f, &[0.0], &LoadProfile::nominal(&f)).unwrap_err();
        assert!(matches!(err, PlantError::NonConvergence { .. }), "{err}");
    }

    fn pv_feeder(q_lim: f64) -> FeederModel {
        let mut buses = vec![
            bus(0, BusKind::Substation, 0.0, 0.0),
            bus(1, BusKind::Load, 200.0, 100.0),
            bus(2, BusKind::DerConstVoltage, 300.0, 150.0),
        ];
        buses[2].v_set_pu = Some(0.99);
        let d = Der {
            bus: 2,
            p_min_kw: 0.0,
            p_max_kw: 100.0,
            q_min_kvar: -q_lim,
            q_max_kvar: q_lim,
        };
        FeederModel::new(
            buses,
            vec![line(1, 0, 1, 0.01, 0.02), line(2, 1, 2, 0.01, 0.02)],
            vec![d],
            Base::default(),
        )
        .unwrap()
    }

    #[test]
    fn pv_bus_holds_setpoint() {
        let f = pv_feeder(1000.0);
        let op = solve_power_flow(&f, &[50.0], &LoadProfile::nominal(&f)).unwrap();
        assert!((op.v_mag[2] - 0.99).abs() < 1e-10);
        assert!(op.q_der[0] > 0.0);
    }

    #[test]
    fn pv_reactive_limit_is_reported() {
        let f = pv_feeder(1.0);
        let err = solve_power_flow(&f, &[50.0], &LoadProfile::nominal(&f)).unwrap_err();
        assert!(matches!(err, PlantError::ReactiveLimit { bus: 2, .. }), "{err}");
    }

    #[test]
    fn balance_closes() {
        let f = pv_feeder(1000.0);
        let load = LoadProfile::nominal(&f);
        let op = solve_power_flow(&f, &[50.0], &load).unwrap();
        let balance = op.y - (50.0 - load.total_p() - op.losses_kw);
        assert!(balance.abs() < 1e-6 * 1000.0, "{balance}");
    }

    #[test]
    fn lossless_sensitivity_is_one() {
        let f = two_bus(0.0, 0.05, 100.0);
        let phi = fd_sensitivity(&f, &[50.0], &LoadProfile::nominal(&f), 0.1).unwrap();
        assert_relative_eq!(phi[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn edge_stencil_matches_central() {
        let f = two_bus(0.01, 0.01, 300.0);
        let load = LoadProfile::nominal(&f);
        let at_edge = fd_sensitivity(&f, &[0.0], &load, 0.1).unwrap()[0];
        let inside = {
            let op = |u: f64| solve_power_flow(&f, &[u], &load).unwrap().y;
            (op(1e-3) - op(0.0)) / 1e-3
        };
        assert!((at_edge - inside).abs() < 1e-4, "{at_edge} vs {inside}");
    }

    #[test]
    fn load_profile_inject() {
        let f = two_bus(0.0, 0.0, 100.0);
        let mut lp = LoadProfile::nominal(&f);
        lp.inject(1, 30.0, 0.0).unwrap();
        assert_eq!(lp.p_d, vec![70.0]);
        assert!(lp.inject(0, 1.0, 0.0).is_err());
    }
}
