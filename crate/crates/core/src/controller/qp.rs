//! Dense strictly convex QP with one equality constraint.
//!
//! ```text
//! minimize   1/2 x^T G x + a^T x
//! subject to c^T x = b
//!            C x >= d
//! ```
//!
//! The equality is removed by a null-space parameterization
//! `x = x0 + Z z` (`Z` an orthonormal basis of `c`'s complement, built from a
//! Householder reflector). The reduced inequality-constrained problem is
//! solved by the Goldfarb-Idnani dual active-set method. Problems here are
//! tiny, so the projected quantities are recomputed from scratch each step
//! instead of being updated through factorizations.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub enum QpError {
    /// The constraints admit no solution. Carries the row that could not be
    /// satisfied, when one was identified.
    Infeasible(Option<usize>),
    /// `G` is not positive definite on the equality's null space.
    NotConvex,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multiplier of the equality (sign: `G x + a = nu c + C^T lambda`).
    pub nu: f64,
    /// Multipliers of the inequalities, zero for inactive rows.
    pub lambda: DVector<f64>,
    /// Indices of inequality rows in the final active set.
    pub active: Vec<usize>,
    pub iterations: usize,
}

pub struct QpProblem<'a> {
    pub g: &'a DMatrix<f64>,
    pub a: &'a DVector<f64>,
    pub c: &'a DVector<f64>,
    pub b: f64,
    pub cin: &'a DMatrix<f64>,
    pub din: &'a DVector<f64>,
}

/// Orthonormal basis of the complement of `c` (n x (n-1)).
fn null_space(c: &DVector<f64>) -> DMatrix<f64> {
    let n = c.len();
    let norm = c.norm();
    let mut v = c.clone();
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign * norm;
    let vv = v.dot(&v);
    let h = DMatrix::identity(n, n) - (&v * v.transpose()) * (2.0 / vv);
    h.columns(1, n - 1).into_owned()
}

pub fn solve(p: &QpProblem<'_>) -> Result<QpSolution, QpError> {
    let n = p.a.len();
    let m = p.din.len();
    let cn = p.c.norm_squared();
    if cn == 0.0 {
        return Err(QpError::Infeasible(None));
    }
    let x0 = p.c * (p.b / cn);
    let (x, lambda_red, active, iterations) = if n == 1 {
        // The equality pins the point.
        for j in 0..m {
            let s = (p.cin.row(j) * &x0)[0] - p.din[j];
            if s < -feas_tol(p.din[j]) {
                return Err(QpError::Infeasible(Some(j)));
            }
        }
        (x0, Vec::new(), Vec::new(), 0)
    } else {
        let z = null_space(p.c);
        let gz = z.transpose() * p.g * &z;
        let az = z.transpose() * (p.g * &x0 + p.a);
        let cz = p.cin * &z;
        let dz = p.din - p.cin * &x0;
        let (zs, u, active, it) = goldfarb_idnani(&gz, &az, &cz, &dz)?;
        (x0 + z * zs, u, active, it)
    };
    let mut lambda = DVector::zeros(m);
    for (&j, &l) in active.iter().zip(&lambda_red) {
        lambda[j] = l;
    }
    let resid = p.g * &x + p.a - p.cin.transpose() * &lambda;
    let nu = p.c.dot(&resid) / cn;
    Ok(QpSolution {
        x,
        nu,
        lambda,
        active,
        iterations,
    })
}

fn feas_tol(d: f64) -> f64 {
    1e-10 * (1.0 + d.abs())
}

/// Goldfarb-Idnani for `min 1/2 z^T G z + a^T z  s.t.  C z >= d`.
/// Returns the minimizer, the multipliers of the active rows, and the rows.
#[allow(clippy::type_complexity)]
fn goldfarb_idnani(
    g: &DMatrix<f64>,
    a: &DVector<f64>,
    c: &DMatrix<f64>,
    d: &DVector<f64>,
) -> Result<(DVector<f64>, Vec<f64>, Vec<usize>, usize), QpError> {
    let dim = a.len();
    let m = d.len();
    let chol = g.clone().cholesky().ok_or(QpError::NotConvex)?;
    let ginv = chol.inverse();
    let mut x = -(&ginv * a);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_iter = 50 * (m + dim) + 100;
    let mut iter = 0;
    let slack = |x: &DVector<f64>, j: usize| (c.row(j) * x)[0] - d[j];

    loop {
        // Most violated constraint, scaled by its row norm.
        let mut pick: Option<(usize, f64)> = None;
        for j in 0..m {
            if active.contains(&j) {
                continue;
            }
            let s = slack(&x, j);
            if s >= -feas_tol(d[j]) {
                continue;
            }
            let rn = c.row(j).norm();
            if rn < 1e-14 {
                return Err(QpError::Infeasible(Some(j)));
            }
            let score = s / rn;
            if pick.map_or(true, |(_, best)| score < best) {
                pick = Some((j, score));
            }
        }
        let Some((pj, _)) = pick else {
            return Ok((x, u, active, iter));
        };
        let np: DVector<f64> = c.row(pj).transpose();
        let mut uplus = u.clone();
        uplus.push(0.0);
        loop {
            iter += 1;
            if iter > max_iter {
                return Err(QpError::IterationLimit);
            }
            let q = active.len();
            let (zdir, r) = if q == 0 {
                (&ginv * &np, DVector::zeros(0))
            } else {
                let nmat = DMatrix::from_fn(dim, q, |i, k| c[(active[k], i)]);
                let gn = &ginv * &nmat;
                let mq = nmat.transpose() * &gn;
                let r = mq
                    .clone()
                    .lu()
                    .solve(&(gn.transpose() * &np))
                    .ok_or(QpError::Infeasible(Some(pj)))?;
                let zdir = &ginv * &np - &gn * &r;
                (zdir, r)
            };
            // Largest dual step before some active multiplier hits zero.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in 0..q {
                if r[k] > 1e-14 {
                    let t = uplus[k] / r[k];
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let ztn = zdir.dot(&np);
            let zero_step = zdir.norm() <= 1e-13 * (1.0 + np.norm()) || ztn <= 1e-16;
            let t2 = if zero_step {
                f64::INFINITY
            } else {
                (-slack(&x, pj) / ztn).max(0.0)
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible(Some(pj)));
            }
            for k in 0..q {
                uplus[k] -= t * r[k];
            }
            uplus[q] += t;
            if zero_step {
                let k = drop.expect("finite t1 has an index");
                active.remove(k);
                uplus.remove(k);
                continue;
            }
            x += &zdir * t;
            if t2 <= t1 {
                active.push(pj);
                u = uplus;
                break;
            }
            let k = drop.expect("finite t1 has an index");
            active.remove(k);
            uplus.remove(k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_space_is_orthonormal_complement() {
        let c = DVector::from_vec(vec![0.9, -1.1, 1.05]);
        let z = null_space(&c);
        assert!((z.transpose() * &c).norm() < 1e-14);
        assert!((z.transpose() * &z - DMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn min_norm_on_hyperplane() {
        let g = DMatrix::identity(2, 2) * 2.0;
        let a = DVector::zeros(2);
        let c = DVector::from_vec(vec![1.0, 1.0]);
        let cin = DMatrix::zeros(0, 2);
        let din = DVector::zeros(0);
        let sol = solve(&QpProblem {
            g: &g,
            a: &a,
            c: &c,
            b: 1.0,
            cin: &cin,
            din: &din,
        })
        .unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-14 && (sol.x[1] - 0.5).abs() < 1e-14);
        assert!((sol.nu - 1.0).abs() < 1e-14);
    }

    #[test]
    fn redundant_rows_are_handled() {
        // x1 <= 0.2 listed twice; x1 + x2 = 1.
        let g = DMatrix::identity(2, 2) * 2.0;
        let a = DVector::zeros(2);
        let c = DVector::from_vec(vec![1.0, 1.0]);
        let cin = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -1.0, 0.0]);
        let din = DVector::from_vec(vec![-0.2, -0.2]);
        let sol = solve(&QpProblem {
            g: &g,
            a: &a,
            c: &c,
            b: 1.0,
            cin: &cin,
            din: &din,
        })
        .unwrap();
        assert!((sol.x[0] - 0.2).abs() < 1e-12, "{}", sol.x);
        assert!((sol.x[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        let g = DMatrix::identity(2, 2);
        let a = DVector::zeros(2);
        let c = DVector::from_vec(vec![1.0, 1.0]);
        // x1 >= 1 and x1 <= 0.
        let cin = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let din = DVector::from_vec(vec![1.0, 0.0]);
        let err = solve(&QpProblem {
            g: &g,
            a: &a,
            c: &c,
            b: 0.0,
            cin: &cin,
            din: &din,
        })
        .unwrap_err();
        assert!(matches!(err, QpError::Infeasible(_)));
    }
}
