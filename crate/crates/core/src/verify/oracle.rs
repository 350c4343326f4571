//! Grid-search oracle for small dispatch problems.

use rand::Rng;
use rayon::prelude::*;

use super::StatTestReport;
use crate::controller::{solve_odcp, ControlError, DispatchProblem, QuadraticCost};
use crate::net::{line_flows_approx, map_injections, Base, Bus, BusKind, Der, FeederModel, Line};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForce {
    pub p: Vec<f64>,
    pub objective: f64,
}

const ZOOM_LEVELS: usize = 6;
const ZOOM_POINTS: usize = 40;
const MAX_RECENTRES: usize = 200;

/// Scans the box for the cheapest feasible point, then refines around it.
///
/// The equality is eliminated through the DER with the largest `|phi_hat|`;
/// the other `n - 1 <= 2` coordinates are gridded at `grid_step` kW and the
/// best point is refined by six twentyfold zooms. Returns
/// [`ControlError::Infeasible`] when no grid point is feasible.
pub fn brute_force_qp(
    prob: &DispatchProblem,
    feeder: Option<&FeederModel>,
    grid_step: f64,
) -> Result<BruteForce, ControlError> {
    let n = prob.n();
    if n > 3 {
        return Err(ControlError::Invalid(format!("grid search needs n <= 3, got {n}")));
    }
    if !(grid_step > 0.0) {
        return Err(ControlError::Invalid("grid_step must be positive".into()));
    }
    let ineq = prob.inequalities(feeder)?;
    let b = prob.equality_rhs();
    let j = (0..n)
        .max_by(|&a, &c| prob.phi_hat[a].abs().total_cmp(&prob.phi_hat[c].abs()))
        .expect("n >= 1");
    let free: Vec<usize> = (0..n).filter(|&i| i != j).collect();
    let tol = 1e-9 * (1.0 + ineq.rhs.amax());
    let eval = |x: &[f64]| -> Option<BruteForce> {
        let mut p = vec![0.0; n];
        let mut rest = b;
        for (k, &i) in free.iter().enumerate() {
            p[i] = x[k];
            rest -= prob.phi_hat[i] * x[k];
        }
        p[j] = rest / prob.phi_hat[j];
        if ineq.max_violation(&p) > tol {
            return None;
        }
        let objective = prob.cost.evaluate(&p, &prob.p_tilde).ok()?;
        Some(BruteForce { p, objective })
    };
    let better = |best: Option<BruteForce>, cand: Option<BruteForce>| match (best, cand) {
        (Some(a), Some(c)) => Some(if c.objective < a.objective { c } else { a }),
        (a, c) => a.or(c),
    };
    let axis = |lo: f64, hi: f64, step: f64| -> Vec<f64> {
        let k = ((hi - lo) / step).ceil().max(0.0) as usize;
        (0..=k).map(|t| (lo + t as f64 * step).min(hi)).collect()
    };
    let scan = |ranges: &[(f64, f64)], step: f64| -> Option<BruteForce> {
        match ranges {
            [] => eval(&[]),
            [(l0, h0)] => axis(*l0, *h0, step)
                .into_iter()
                .fold(None, |acc, x| better(acc, eval(&[x]))),
            [(l0, h0), (l1, h1)] => {
                let ys = axis(*l1, *h1, step);
                axis(*l0, *h0, step).into_iter().fold(None, |acc, x| {
                    ys.iter().fold(acc, |acc, &y| better(acc, eval(&[x, y])))
                })
            }
            _ => unreachable!("at most two free coordinates"),
        }
    };
    let full: Vec<(f64, f64)> = free.iter().map(|&i| (prob.p_min[i], prob.p_max[i])).collect();
    let mut best = scan(&full, grid_step).ok_or_else(|| {
        ControlError::Infeasible("no feasible point on the search grid".into())
    })?;
    // Each level re-centres until it stops improving, so the search can
    // slide along a slanted constraint that the box-aligned grid cuts.
    let mut step = grid_step;
    for _ in 0..ZOOM_LEVELS {
        let fine = 2.0 * step / ZOOM_POINTS as f64;
        for _ in 0..MAX_RECENTRES {
            let window: Vec<(f64, f64)> = free
                .iter()
                .zip(&full)
                .map(|(&i, &(lo, hi))| ((best.p[i] - step).max(lo), (best.p[i] + step).min(hi)))
                .collect();
            match scan(&window, fine) {
                Some(c) if c.objective < best.objective => best = c,
                _ => break,
            }
        }
        step = fine;
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct QpInstance {
    pub feeder: FeederModel,
    pub prob: DispatchProblem,
    /// True when the target was placed beyond the reachable output.
    pub infeasible_by_construction: bool,
}

/// A random tree of 3 to 7 buses with 2 or 3 DERs, random line orientation,
/// and a target reachable from some interior point `p*`. Some lines get a
/// limit slightly above their flow at `p*`, so `p*` stays feasible. With
/// `infeasible` the target is pushed beyond the largest reachable output.
pub fn random_qp_instance(seed: u64, infeasible: bool) -> QpInstance {
    let mut rng = stream_rng(seed, Stream::ScenarioNoise);
    let n_bus = rng.random_range(3..=7);
    let n = rng.random_range(2..=3);
    let mut der_buses: Vec<usize> = Vec::new();
    while der_buses.len() < n {
        let b = rng.random_range(1..=n_bus);
        if !der_buses.contains(&b) {
            der_buses.push(b);
        }
    }
    let mut buses = vec![Bus {
        id: 0,
        kind: BusKind::Substation,
        p_load_kw: 0.0,
        q_load_kvar: 0.0,
        v_set_pu: Some(1.0),
    }];
    let mut lines = Vec::new();
    for b in 1..=n_bus {
        buses.push(Bus {
            id: b,
            kind: if der_buses.contains(&b) {
                BusKind::DerUnityPf
            } else {
                BusKind::Load
            },
            p_load_kw: rng.random_range(0.0..20.0),
            q_load_kvar: 0.0,
            v_set_pu: None,
        });
        let parent = rng.random_range(0..b);
        let (from, to) = if rng.random_bool(0.3) { (b, parent) } else { (parent, b) };
        lines.push(Line {
            id: b,
            from,
            to,
            r_pu: 0.01,
            x_pu: 0.01,
            f_max_kw: f64::INFINITY,
        });
    }
    let ders: Vec<Der> = der_buses
        .iter()
        .map(|&bus| {
            let lo = rng.random_range(0.0..5.0);
            Der {
                bus,
                p_min_kw: lo,
                p_max_kw: lo + rng.random_range(5.0..20.0),
                q_min_kvar: 0.0,
                q_max_kvar: 0.0,
            }
        })
        .collect();
    let feeder = FeederModel::new(buses, lines, ders, Base::default()).expect("valid random tree");
    let (lo, hi) = (feeder.der_p_min(), feeder.der_p_max());
    let inside = |rng: &mut rand_chacha::ChaCha8Rng, margin: f64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let w = hi[i] - lo[i];
                rng.random_range(lo[i] + margin * w..=hi[i] - margin * w)
            })
            .collect()
    };
    let phi_hat: Vec<f64> = (0..n).map(|_| rng.random_range(0.8..1.2)).collect();
    let p_tilde = inside(&mut rng, 0.0);
    let p_star = inside(&mut rng, 0.1);
    let y_now = rng.random_range(-50.0..50.0);
    let reach = |p: &[f64]| -> f64 {
        y_now + (0..n).map(|i| phi_hat[i] * (p[i] - p_tilde[i])).sum::<f64>()
    };
    let y_star = if infeasible {
        reach(&hi) + rng.random_range(1.0..10.0)
    } else {
        reach(&p_star)
    };
    let p_d = feeder.p_load();
    let inj = map_injections(&feeder, &p_star, &p_d).expect("lengths match");
    let f_star = line_flows_approx(&feeder, &inj).expect("lengths match");
    let flow_limits: Vec<f64> = f_star
        .iter()
        .map(|f| {
            if rng.random_bool(0.4) {
                f.abs() + rng.random_range(0.5..5.0)
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let cost = QuadraticCost {
        weights: Some((0..n).map(|_| rng.random_range(0.5..2.0)).collect()),
        linear: rng
            .random_bool(0.5)
            .then(|| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()),
        reference: None,
    };
    let prob = DispatchProblem {
        y_now,
        p_tilde,
        phi_hat,
        y_star,
        p_min: lo,
        p_max: hi,
        flow_limits,
        p_d,
        cost,
    };
    QpInstance {
        feeder,
        prob,
        infeasible_by_construction: infeasible,
    }
}

/// Compares the active-set solver with the grid oracle on `n_instances`
/// random instances, every tenth one infeasible by construction.
///
/// An instance passes when both report infeasibility, or both solve with an
/// objective gap of at most 1e-3 and solver KKT residuals of at most 1e-6.
pub fn check_qp_oracle(seed: u64, n_instances: usize) -> StatTestReport {
    let mut rep = StatTestReport::new(
        "odcp_oracle",
        seed,
        1.0,
        "deterministic; every instance must agree",
    );
    let results: Vec<Result<(), String>> = (0..n_instances as u64)
        .into_par_iter()
        .map(|i| {
            let inst = random_qp_instance(seed.wrapping_add(i), i % 10 == 9);
            let f = Some(&inst.feeder);
            let qp = solve_odcp(&inst.prob, f);
            let bf = brute_force_qp(&inst.prob, f, 0.02);
            match (qp, bf) {
                (Ok(q), Ok(b)) => {
                    let gap = (q.objective - b.objective).abs();
                    if gap > 1e-3 {
                        Err(format!("instance {i}: objective gap {gap:.3e}"))
                    } else if q.kkt.max() > 1e-6 {
                        Err(format!("instance {i}: KKT residual {:.3e}", q.kkt.max()))
                    } else {
                        Ok(())
                    }
                }
                (Err(ControlError::Infeasible(_)), Err(ControlError::Infeasible(_))) => Ok(()),
                (q, b) => Err(format!(
                    "instance {i}: solver {:?} vs grid {:?}",
                    q.map(|d| d.objective),
                    b.map(|d| d.objective)
                )),
            }
        })
        .collect();
    let passed = results.iter().filter(|r| r.is_ok()).count();
    rep.notes
        .extend(results.into_iter().filter_map(Result::err).take(10));
    rep.tally(passed, n_instances);
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves_instance() {
        // min |p - 0|^2 with p1 + p2 = 1 on [0, 1]^2 is (0.5, 0.5).
        let prob = DispatchProblem {
            y_now: 0.0,
            p_tilde: vec![0.0, 0.0],
            phi_hat: vec![1.0, 1.0],
            y_star: 1.0,
            p_min: vec![0.0; 2],
            p_max: vec![1.0; 2],
            flow_limits: vec![],
            p_d: vec![],
            cost: QuadraticCost::default(),
        };
        let b = brute_force_qp(&prob, None, 0.01).unwrap();
        assert!((b.p[0] - 0.5).abs() < 0.01 && (b.p[1] - 0.5).abs() < 0.01);
        assert!((b.objective - 0.5).abs() < 1e-6);
    }

    #[test]
    fn unreachable_target_agrees() {
        let inst = random_qp_instance(3, true);
        let f = Some(&inst.feeder);
        assert!(matches!(solve_odcp(&inst.prob, f), Err(ControlError::Infeasible(_))));
        assert!(matches!(
            brute_force_qp(&inst.prob, f, 0.05),
            Err(ControlError::Infeasible(_))
        ));
    }
}
