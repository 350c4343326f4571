//! Radial feeder model.
//!
//! Buses are numbered `0..=N` with bus 0 the substation. Lines are numbered
//! `1..=L` and carry a reference direction `from -> to`. Vectors indexed by
//! bus ("bus vectors") have length `N` and skip the substation: entry `i`
//! belongs to bus `i + 1`. Vectors indexed by line have length `L` and entry
//! `l` belongs to line `l + 1`.

mod parse;

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{load_feeder, parse_feeder};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("failed to read feeder file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("not radial: {0}")]
    NotRadial(String),
    #[error("invalid feeder: {0}")]
    Invalid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Substation,
    Load,
    /// DER operating at unity power factor.
    DerUnityPf,
    /// DER holding its bus voltage magnitude at a set-point.
    DerConstVoltage,
}

impl BusKind {
    pub fn is_der(self) -> bool {
        matches!(self, BusKind::DerUnityPf | BusKind::DerConstVoltage)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BusKind::Substation => "substation",
            BusKind::Load => "load",
            BusKind::DerUnityPf => "der_unity_pf",
            BusKind::DerConstVoltage => "der_const_voltage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// Active demand in kW, positive for consumption.
    pub p_load_kw: f64,
    pub q_load_kvar: f64,
    /// Voltage magnitude set-point (pu). Required for constant-voltage DER
    /// buses, optional for the substation (defaults to 1.0).
    pub v_set_pu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub id: usize,
    pub from: usize,
    pub to: usize,
    pub r_pu: f64,
    pub x_pu: f64,
    /// Active-power capacity in kW, `f64::INFINITY` when unconstrained.
    pub f_max_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Der {
    pub bus: usize,
    pub p_min_kw: f64,
    pub p_max_kw: f64,
    pub q_min_kvar: f64,
    pub q_max_kvar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Base {
    pub s_base_kva: f64,
    pub v_base_kv: f64,
}

impl Default for Base {
    fn default() -> Self {
        Base {
            s_base_kva: 1000.0,
            v_base_kv: 4.16,
        }
    }
}

/// Rooted view of the tree, computed once at construction.
#[derive(Debug, Clone, PartialEq)]
struct Topology {
    /// Parent bus of every bus; `usize::MAX` for the root.
    parent: Vec<usize>,
    /// Index (0-based) of the line connecting a bus to its parent.
    parent_line: Vec<usize>,
    /// Bus ids in breadth-first order from the root, root first.
    order: Vec<usize>,
    /// Per line: true when `from` is the upstream (parent) end.
    downstream: Vec<bool>,
}

/// A validated radial feeder. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeederModel {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    ders: Vec<Der>,
    base: Base,
    #[serde(skip)]
    topo: Topology,
}

impl FeederModel {
    /// Validates the data and builds the rooted tree.
    ///
    /// Buses may be given in any order but their ids must be exactly
    /// `0..=N`; likewise line ids must be `1..=L`. DERs keep their given
    /// order, which defines the DER index used everywhere else.
    pub fn new(
        mut buses: Vec<Bus>,
        mut lines: Vec<Line>,
        ders: Vec<Der>,
        base: Base,
    ) -> Result<Self, NetError> {
        buses.sort_by_key(|b| b.id);
        for (i, b) in buses.iter().enumerate() {
            if b.id != i {
                return Err(NetError::Invalid(format!(
                    "bus ids must be 0..={} without gaps or duplicates (found {} at position {i})",
                    buses.len().saturating_sub(1),
                    b.id
                )));
            }
        }
        if buses.len() < 2 {
            return Err(NetError::Invalid("a feeder needs at least two buses".into()));
        }
        let n_bus = buses.len() - 1;
        let subs: Vec<usize> = buses
            .iter()
            .filter(|b| b.kind == BusKind::Substation)
            .map(|b| b.id)
            .collect();
        if subs != [0] {
            return Err(NetError::Invalid(format!(
                "exactly one substation at bus 0 is required, found {subs:?}"
            )));
        }
        let sub = &buses[0];
        if sub.p_load_kw != 0.0 || sub.q_load_kvar != 0.0 {
            return Err(NetError::Invalid("the substation bus cannot carry load".into()));
        }
        for b in &buses {
            if !b.p_load_kw.is_finite() || !b.q_load_kvar.is_finite() {
                return Err(NetError::Invalid(format!("bus {} has a non-finite load", b.id)));
            }
            match (b.kind, b.v_set_pu) {
                (BusKind::DerConstVoltage, None) => {
                    return Err(NetError::Invalid(format!(
                        "constant-voltage bus {} needs a voltage set-point",
                        b.id
                    )))
                }
                (_, Some(v)) if !(v > 0.5 && v < 1.5) => {
                    return Err(NetError::Invalid(format!(
                        "bus {} voltage set-point {v} outside (0.5, 1.5) pu",
                        b.id
                    )))
                }
                _ => {}
            }
        }

        lines.sort_by_key(|l| l.id);
        for (i, l) in lines.iter().enumerate() {
            if l.id != i + 1 {
                return Err(NetError::Invalid(format!(
                    "line ids must be 1..={} without gaps or duplicates (found {} at position {i})",
                    lines.len(),
                    l.id
                )));
            }
            if l.from > n_bus || l.to > n_bus {
                return Err(NetError::Invalid(format!(
                    "line {} references a missing bus",
                    l.id
                )));
            }
            if l.from == l.to {
                return Err(NetError::Invalid(format!("line {} is a self-loop", l.id)));
            }
            if !(l.r_pu >= 0.0) || !l.x_pu.is_finite() || !l.r_pu.is_finite() {
                return Err(NetError::Invalid(format!(
                    "line {} has invalid impedance r={} x={}",
                    l.id, l.r_pu, l.x_pu
                )));
            }
            if !(l.f_max_kw > 0.0) {
                return Err(NetError::Invalid(format!(
                    "line {} capacity must be positive",
                    l.id
                )));
            }
        }
        if lines.len() != n_bus {
            return Err(NetError::NotRadial(format!(
                "a radial feeder with N = {n_bus} buses needs L = N lines, found {}",
                lines.len()
            )));
        }

        let mut seen = vec![false; buses.len()];
        for d in &ders {
            if d.bus == 0 || d.bus > n_bus {
                return Err(NetError::Invalid(format!("DER at invalid bus {}", d.bus)));
            }
            if seen[d.bus] {
                return Err(NetError::Invalid(format!(
                    "more than one DER at bus {}",
                    d.bus
                )));
            }
            seen[d.bus] = true;
            if !buses[d.bus].kind.is_der() {
                return Err(NetError::Invalid(format!(
                    "DER at bus {} but the bus kind is {}",
                    d.bus,
                    buses[d.bus].kind.as_str()
                )));
            }
            let finite = [d.p_min_kw, d.p_max_kw, d.q_min_kvar, d.q_max_kvar]
                .iter()
                .all(|v| v.is_finite());
            if !finite || d.p_min_kw > d.p_max_kw || d.q_min_kvar > d.q_max_kvar {
                return Err(NetError::Invalid(format!(
                    "DER at bus {} has inconsistent limits",
                    d.bus
                )));
            }
        }
        for b in &buses {
            if b.kind.is_der() && !seen[b.id] {
                return Err(NetError::Invalid(format!(
                    "bus {} is a DER bus but has no [ders] entry",
                    b.id
                )));
            }
        }
        if !(base.s_base_kva > 0.0) || !(base.v_base_kv > 0.0) {
            return Err(NetError::Invalid("bases must be positive".into()));
        }

        let topo = build_topology(n_bus, &lines)?;
        Ok(FeederModel {
            buses,
            lines,
            ders,
            base,
            topo,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, NetError> {
        load_feeder(path)
    }

    /// Number of non-substation buses, `N`.
    pub fn n_buses(&self) -> usize {
        self.buses.len() - 1
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    /// Number of DERs, `n`.
    pub fn n_ders(&self) -> usize {
        self.ders.len()
    }

    /// All buses including the substation, indexed by id.
    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    /// Lines indexed by `id - 1`.
    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn line(&self, id: usize) -> Option<&Line> {
        id.checked_sub(1).and_then(|i| self.lines.get(i))
    }

    pub fn ders(&self) -> &[Der] {
        &self.ders
    }

    pub fn der_buses(&self) -> Vec<usize> {
        self.ders.iter().map(|d| d.bus).collect()
    }

    pub fn der_p_min(&self) -> Vec<f64> {
        self.ders.iter().map(|d| d.p_min_kw).collect()
    }

    pub fn der_p_max(&self) -> Vec<f64> {
        self.ders.iter().map(|d| d.p_max_kw).collect()
    }

    pub fn base(&self) -> Base {
        self.base
    }

    /// Substation voltage magnitude (pu).
    pub fn v_source(&self) -> f64 {
        self.buses[0].v_set_pu.unwrap_or(1.0)
    }

    /// Nominal active loads as a bus vector (kW).
    pub fn p_load(&self) -> Vec<f64> {
        self.buses[1..].iter().map(|b| b.p_load_kw).collect()
    }

    /// Nominal reactive loads as a bus vector (kVAr).
    pub fn q_load(&self) -> Vec<f64> {
        self.buses[1..].iter().map(|b| b.q_load_kvar).collect()
    }

    pub fn flow_limits(&self) -> Vec<f64> {
        self.lines.iter().map(|l| l.f_max_kw).collect()
    }

    /// Upstream neighbour of `bus`, `None` for the substation.
    pub fn parent(&self, bus: usize) -> Option<usize> {
        let p = self.topo.parent[bus];
        (p != usize::MAX).then_some(p)
    }

    /// 0-based index of the line joining `bus` to its parent.
    pub fn parent_line(&self, bus: usize) -> Option<usize> {
        self.parent(bus).map(|_| self.topo.parent_line[bus])
    }

    /// Buses in breadth-first order from the substation (substation first).
    /// Every bus appears after its parent.
    pub fn order(&self) -> &[usize] {
        &self.topo.order
    }

    /// True when line `idx` (0-based) is oriented away from the substation.
    pub fn line_points_downstream(&self, idx: usize) -> bool {
        self.topo.downstream[idx]
    }

    /// Bus at the downstream end of line `idx` (0-based).
    pub fn line_child(&self, idx: usize) -> usize {
        let l = &self.lines[idx];
        if self.topo.downstream[idx] {
            l.to
        } else {
            l.from
        }
    }

    /// Returns a copy with a different capacity on one line.
    pub fn with_line_limit(&self, line_id: usize, f_max_kw: f64) -> Result<Self, NetError> {
        let mut lines = self.lines.clone();
        let line = id_lookup(&mut lines, line_id)?;
        line.f_max_kw = f_max_kw;
        FeederModel::new(self.buses.clone(), lines, self.ders.clone(), self.base)
    }

    /// Returns a copy with the DER at `bus` disconnected. The bus keeps its
    /// load and becomes an ordinary load bus.
    pub fn without_der(&self, bus: usize) -> Result<Self, NetError> {
        if !self.ders.iter().any(|d| d.bus == bus) {
            return Err(NetError::Invalid(format!("no DER at bus {bus}")));
        }
        let ders = self.ders.iter().filter(|d| d.bus != bus).cloned().collect();
        let mut buses = self.buses.clone();
        buses[bus].kind = BusKind::Load;
        buses[bus].v_set_pu = None;
        FeederModel::new(buses, self.lines.clone(), ders, self.base)
    }

    /// Sensitivity of the approximate line flows to each DER injection:
    /// column `i` is `M^-1 C e_i`.
    pub fn der_flow_matrix(&self) -> DMatrix<f64> {
        let n = self.n_ders();
        let mut out = DMatrix::zeros(self.n_lines(), n);
        let mut p = vec![0.0; self.n_buses()];
        for (i, d) in self.ders.iter().enumerate() {
            p.iter_mut().for_each(|v| *v = 0.0);
            p[d.bus - 1] = 1.0;
            let f = line_flows_approx(self, &p).expect("length matches");
            out.set_column(i, &nalgebra::DVector::from_vec(f));
        }
        out
    }
}

fn id_lookup(lines: &mut [Line], id: usize) -> Result<&mut Line, NetError> {
    lines
        .iter_mut()
        .find(|l| l.id == id)
        .ok_or_else(|| NetError::Invalid(format!("no line with id {id}")))
}

fn build_topology(n_bus: usize, lines: &[Line]) -> Result<Topology, NetError> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_bus + 1];
    for (idx, l) in lines.iter().enumerate() {
        adj[l.from].push((l.to, idx));
        adj[l.to].push((l.from, idx));
    }
    let mut parent = vec![usize::MAX; n_bus + 1];
    let mut parent_line = vec![usize::MAX; n_bus + 1];
    let mut visited = vec![false; n_bus + 1];
    let mut order = Vec::with_capacity(n_bus + 1);
    let mut queue = VecDeque::from([0usize]);
    visited[0] = true;
    while let Some(b) = queue.pop_front() {
        order.push(b);
        for &(nb, idx) in &adj[b] {
            if idx == parent_line[b] {
                continue;
            }
            if visited[nb] {
                return Err(NetError::NotRadial(format!(
                    "cycle detected through line {}",
                    lines[idx].id
                )));
            }
            visited[nb] = true;
            parent[nb] = b;
            parent_line[nb] = idx;
            queue.push_back(nb);
        }
    }
    if let Some(b) = visited.iter().position(|v| !v) {
        return Err(NetError::NotRadial(format!(
            "bus {b} is not connected to the substation"
        )));
    }
    let downstream = lines
        .iter()
        .map(|l| parent[l.to] == l.from && parent_line[l.to] != usize::MAX)
        .collect();
    Ok(Topology {
        parent,
        parent_line,
        order,
        downstream,
    })
}

/// Reduced incidence matrix `M` (N x L): row `i` is bus `i + 1`, +1 where a
/// line leaves the bus and -1 where it enters. Square and unimodular for a
/// tree.
pub fn incidence_matrix(feeder: &FeederModel) -> DMatrix<i32> {
    let mut m = DMatrix::zeros(feeder.n_buses(), feeder.n_lines());
    for (idx, l) in feeder.lines.iter().enumerate() {
        if l.from > 0 {
            m[(l.from - 1, idx)] = 1;
        }
        if l.to > 0 {
            m[(l.to - 1, idx)] = -1;
        }
    }
    m
}

/// Bus injections `p = C p_g - p_d` (bus vector, kW).
pub fn map_injections(feeder: &FeederModel, p_g: &[f64], p_d: &[f64]) -> Result<Vec<f64>, NetError> {
    check_len(feeder.n_ders(), p_g.len())?;
    check_len(feeder.n_buses(), p_d.len())?;
    let mut p: Vec<f64> = p_d.iter().map(|v| -v).collect();
    for (d, g) in feeder.ders.iter().zip(p_g) {
        p[d.bus - 1] += g;
    }
    Ok(p)
}

/// Lossless line-flow approximation `f = M^-1 p`.
///
/// Solved on the tree directly: the flow on the line above a bus is the
/// negated sum of injections in that bus's subtree, signed by the line's
/// reference direction. O(N), no matrix factorization.
pub fn line_flows_approx(feeder: &FeederModel, p: &[f64]) -> Result<Vec<f64>, NetError> {
    check_len(feeder.n_buses(), p.len())?;
    let mut subtree = vec![0.0; feeder.n_buses() + 1];
    subtree[1..].copy_from_slice(p);
    let mut f = vec![0.0; feeder.n_lines()];
    for &b in feeder.topo.order.iter().rev() {
        if b == 0 {
            continue;
        }
        let idx = feeder.topo.parent_line[b];
        let s = subtree[b];
        f[idx] = if feeder.topo.downstream[idx] { -s } else { s };
        subtree[feeder.topo.parent[b]] += s;
    }
    Ok(f)
}

fn check_len(expected: usize, got: usize) -> Result<(), NetError> {
    if expected == got {
        Ok(())
    } else {
        Err(NetError::Dimension { expected, got })
    }
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    #[test]
    fn two_bus_incidence_is_minus_one() {
        let f = chain(&[100.0], 0.01, 0.01);
        let m = incidence_matrix(&f);
        assert_eq!(m.shape(), (1, 1));
        assert_eq!(m[(0, 0)], -1);
    }

    #[test]
    fn chain_incidence() {
        let f = chain(&[1.0, 1.0], 0.01, 0.01);
        let m = incidence_matrix(&f);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[-1, 1, 0, -1]));
    }

    #[test]
    fn single_line_flow_sign() {
        let f = chain(&[100.0], 0.01, 0.01);
        assert_eq!(line_flows_approx(&f, &[-100.0]).unwrap(), vec![100.0]);
    }

    #[test]
    fn chain_flows_are_downstream_sums() {
        let f = chain(&[100.0, 50.0], 0.01, 0.01);
        assert_eq!(line_flows_approx(&f, &[-100.0, -50.0]).unwrap(), vec![150.0, 50.0]);
    }

    #[test]
    fn reversed_line_flips_sign() {
        let buses = vec![
            bus(0, BusKind::Substation, 0.0, 0.0),
            bus(1, BusKind::Load, 10.0, 0.0),
        ];
        let f = FeederModel::new(buses, vec![line(1, 1, 0, 0.0, 0.0)], vec![], Base::default())
            .unwrap();
        assert_eq!(line_flows_approx(&f, &[-10.0]).unwrap(), vec![-10.0]);
        assert!(!f.line_points_downstream(0));
        assert_eq!(incidence_matrix(&f)[(0, 0)], 1);
    }

    #[test]
    fn map_injections_examples() {
        let buses = vec![
            bus(0, BusKind::Substation, 0.0, 0.0),
            bus(1, BusKind::DerUnityPf, 100.0, 0.0),
        ];
        let f = FeederModel::new(
            buses,
            vec![line(1, 0, 1, 0.0, 0.0)],
            vec![der(1, 0.0, 100.0)],
            Base::default(),
        )
        .unwrap();
        assert_eq!(map_injections(&f, &[50.0], &[100.0]).unwrap(), vec![-50.0]);
        assert_eq!(map_injections(&f, &[0.0], &[100.0]).unwrap(), vec![-100.0]);
        assert!(matches!(
            map_injections(&f, &[0.0, 1.0], &[100.0]),
            Err(NetError::Dimension { .. })
        ));
    }

    #[test]
    fn triangle_is_rejected() {
        let buses = vec![
            bus(0, BusKind::Substation, 0.0, 0.0),
            bus(1, BusKind::Load, 1.0, 0.0),
            bus(2, BusKind::Load, 1.0, 0.0),
        ];
        let lines = vec![
            line(1, 0, 1, 0.01, 0.01),
            line(2, 1, 2, 0.01, 0.01),
            line(3, 2, 0, 0.01, 0.01),
        ];
        let err = FeederModel::new(buses, lines, vec![], Base::default()).unwrap_err();
        assert!(matches!(err, NetError::NotRadial(_)), "{err}");
    }

    #[test]
    fn cycle_with_island_is_rejected() {
        // L == N but bus 3 is isolated and 0-1-2 form a loop.
        let buses = (0..4)
            .map(|i| {
                let kind = if i == 0 { BusKind::Substation } else { BusKind::Load };
                bus(i, kind, 0.0, 0.0)
            })
            .collect();
        let lines = vec![
            line(1, 0, 1, 0.01, 0.01),
            line(2, 1, 2, 0.01, 0.01),
            line(3, 2, 0, 0.01, 0.01),
        ];
        let err = FeederModel::new(buses, lines, vec![], Base::default()).unwrap_err();
        assert!(matches!(err, NetError::NotRadial(_)), "{err}");
    }

    #[test]
    fn duplicate_der_is_rejected() {
        let buses = vec![
            bus(0, BusKind::Substation, 0.0, 0.0),
            bus(1, BusKind::DerUnityPf, 1.0, 0.0),
        ];
        let err = FeederModel::new(
            buses,
            vec![line(1, 0, 1, 0.01, 0.01)],
            vec![der(1, 0.0, 1.0), der(1, 0.0, 1.0)],
            Base::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("more than one DER"));
    }

    #[test]
    fn without_der_drops_index() {
        let buses = vec![
            bus(0, BusKind::Substation, 0.0, 0.0),
            bus(1, BusKind::DerUnityPf, 1.0, 0.0),
            bus(2, BusKind::DerUnityPf, 1.0, 0.0),
        ];
        let f = FeederModel::new(
            buses,
            vec![line(1, 0, 1, 0.01, 0.01), line(2, 1, 2, 0.01, 0.01)],
            vec![der(1, 0.0, 1.0), der(2, 0.0, 2.0)],
            Base::default(),
        )
        .unwrap();
        let g = f.without_der(1).unwrap();
        assert_eq!(g.der_buses(), vec![2]);
        assert_eq!(g.buses()[1].kind, BusKind::Load);
    }

    #[test]
    fn der_flow_matrix_columns() {
        let buses = vec![
            bus(0, BusKind::Substation, 0.0, 0.0),
            bus(1, BusKind::DerUnityPf, 0.0, 0.0),
            bus(2, BusKind::DerUnityPf, 0.0, 0.0),
        ];
        let f = FeederModel::new(
            buses,
            vec![line(1, 0, 1, 0.01, 0.01), line(2, 1, 2, 0.01, 0.01)],
            vec![der(1, 0.0, 1.0), der(2, 0.0, 2.0)],
            Base::default(),
        )
        .unwrap();
        let a = f.der_flow_matrix();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 0.0, -1.0]));
    }
}
