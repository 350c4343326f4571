use serde::{Deserialize, Serialize};

use super::{Phase, SimError, SimTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Per-row mean absolute estimation error, averaged over the `n` DERs.
    pub mae: Vec<f64>,
    pub terminal_e: f64,
    /// First row with `|e| <= delta`.
    pub iterations_to_delta: Option<usize>,
    /// Rows with `|flow| > limit`, per line (empty without flow data).
    pub overload_duration: Vec<usize>,
}

/// Error metrics against an oracle sensitivity series.
///
/// `oracle_phi` holds either one vector per trace row or a single vector
/// used for every row.
pub fn compute_metrics(trace: &SimTrace, oracle_phi: &[Vec<f64>]) -> Result<Metrics, SimError> {
    let rows = &trace.rows;
    let n = trace.n();
    if !(oracle_phi.len() == rows.len() || oracle_phi.len() == 1) {
        return Err(SimError::Misaligned(format!(
            "{} oracle vectors for {} rows",
            oracle_phi.len(),
            rows.len()
        )));
    }
    if let Some(bad) = oracle_phi.iter().find(|v| v.len() != n) {
        return Err(SimError::Misaligned(format!(
            "oracle vector of length {} for {n} DERs",
            bad.len()
        )));
    }
    let mae = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let phi = if oracle_phi.len() == 1 {
                &oracle_phi[0]
            } else {
                &oracle_phi[i]
            };
            mae(&r.phi_hat, phi)
        })
        .collect();
    let limits = &trace.header.flow_limits;
    let mut overload = vec![0usize; limits.len()];
    for flows in &trace.line_flows {
        if flows.len() != limits.len() {
            continue;
        }
        for (l, (f, lim)) in flows.iter().zip(limits).enumerate() {
            if let Some(lim) = lim {
                if f.abs() > *lim {
                    overload[l] += 1;
                }
            }
        }
    }
    Ok(Metrics {
        mae,
        terminal_e: rows.last().map_or(f64::NAN, |r| r.e),
        iterations_to_delta: rows
            .iter()
            .find(|r| r.e.abs() <= trace.header.delta)
            .map(|r| r.k),
        overload_duration: overload,
    })
}

/// `(1/n) sum_i |a_i - b_i|`.
pub fn mae(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// The three possible end states of a tracking run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Equilibrium {
    /// `|e| <= delta`.
    Tracked,
    /// Every setpoint at its lower bound with a constant positive error.
    AtLower,
    /// Every setpoint at its upper bound with a constant negative error.
    AtUpper,
}

/// Classifies the final state of a trace, or explains why it fits none of
/// the three equilibria.
pub fn classify(trace: &SimTrace) -> Result<Equilibrium, String> {
    let h = &trace.header;
    let last = trace.rows.last().ok_or("empty trace")?;
    if last.e.abs() <= h.delta {
        return Ok(Equilibrium::Tracked);
    }
    let near = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
    let at_lo = last.u.iter().zip(&h.u_lo).all(|(u, l)| near(*u, *l));
    let at_hi = last.u.iter().zip(&h.u_hi).all(|(u, l)| near(*u, *l));
    let window = h.stall_window.min(trace.rows.len());
    let tail = &trace.rows[trace.rows.len() - window..];
    let constant = tail.iter().all(|r| near(r.e, last.e));
    if !constant {
        return Err(format!(
            "error not constant over the final {window} rows (last e = {})",
            last.e
        ));
    }
    match (at_lo, at_hi, last.e > 0.0) {
        (true, _, true) => Ok(Equilibrium::AtLower),
        (_, true, false) => Ok(Equilibrium::AtUpper),
        _ => Err(format!(
            "final setpoints not saturated consistently with e = {} (at lower: {at_lo}, at upper: {at_hi})",
            last.e
        )),
    }
}

/// Checks that every fast row's projected update equals an unprojected one
/// with some `0 <= phi_bar <= phi_hat`. Returns the witnesses (one vector per
/// row, row 0 empty) or the first `(row, der)` where none exists.
pub fn lemma1_witness(trace: &SimTrace, beta: f64) -> Result<Vec<Vec<f64>>, (usize, usize)> {
    let mut out = vec![Vec::new()];
    for w in trace.rows.windows(2) {
        let (prev, cur) = (&w[0], &w[1]);
        if cur.phase != Phase::Fast {
            out.push(Vec::new());
            continue;
        }
        let mut bar = Vec::with_capacity(cur.u.len());
        for i in 0..cur.u.len() {
            let step = beta * prev.e;
            if !cur.w[i] || step == 0.0 {
                bar.push(0.0);
                continue;
            }
            let v = (prev.u[i] - cur.u[i]) / step;
            let tol = 1e-9 * (1.0 + cur.phi_hat[i]) + 1e-12 * (prev.u[i].abs() + 1.0) / step.abs();
            if v < -tol || v > cur.phi_hat[i] + tol {
                return Err((cur.k, i));
            }
            bar.push(v.clamp(0.0, cur.phi_hat[i]));
        }
        out.push(bar);
    }
    Ok(out)
}
