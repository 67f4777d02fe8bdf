//! Small dense quadratic program solver for input filtering.
//!
//! Solves
//!
//! ```text
//! min_u  1/2 ||u - u_ref||^2            (+ 1/2 w s^2 when slack is enabled)
//! s.t.   a_i' u >= b_i                  (a_i' u + s >= b_i with slack)
//!        u_lo <= u <= u_hi,  s >= 0
//! ```
//!
//! with a dense active-set iteration of the Goldfarb–Idnani (dual) family,
//! specialized to the (diagonal) Hessian of this projection problem: start at
//! the unconstrained optimum, repeatedly pick a violated row, and take mixed
//! primal/dual steps that add it to the active set while dropping rows whose
//! multipliers would become negative. Every iterate is dual feasible, and on
//! termination the KKT conditions hold to solver tolerance (the achieved
//! stationarity/complementarity residual is reported on the solution).
//!
//! The slack is a *single shared* hinge variable: a strict solve is attempted
//! first, and only if the rows are mutually (or box-) inconsistent is the
//! relaxed problem solved, so slack never perturbs feasible solutions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Row-violation tolerance: rows within this of their bound count satisfied.
pub const FEASIBILITY_TOL: f64 = 1e-10;

/// Relative threshold on the projected direction below which a row is treated
/// as linearly dependent on the active set.
const ZERO_DIRECTION_TOL: f64 = 1e-12;

/// Slack values above this are reported as "slack used".
pub const SLACK_REPORT_TOL: f64 = 1e-9;

/// Input-filtering quadratic program.
#[derive(Clone, Debug)]
pub struct QPProblem {
    /// Reference input to stay close to.
    pub u_ref: DVector<f64>,
    /// Half-space rows `a' u >= b`.
    pub rows: Vec<(DVector<f64>, f64)>,
    /// Optional per-input box `[u_lo, u_hi]` (entries may be infinite).
    pub bounds: Option<(DVector<f64>, DVector<f64>)>,
    /// Optional slack penalty weight `w > 0`; `None` means hard constraints.
    pub slack_weight: Option<f64>,
}

/// Solution of [`solve_qp`].
#[derive(Clone, Debug)]
pub struct QpSolution {
    /// Optimal input.
    pub u: DVector<f64>,
    /// Value of the shared slack variable (0 when unused).
    pub slack: f64,
    /// True when the strict problem was infeasible and slack was engaged.
    pub slack_used: bool,
    /// Indices of problem rows active (tight) at the solution.
    pub active: Vec<usize>,
    /// Active-set iterations of the successful solve.
    pub iterations: usize,
    /// Max-norm KKT residual (stationarity, primal/dual feasibility,
    /// complementarity) achieved at the returned point.
    pub kkt_residual: f64,
}

/// Solve the input-filtering QP. See the module docs for the method.
///
/// # Errors
///
/// `Config` for malformed problems (empty constraint set, nonpositive slack
/// weight, inverted bounds), `Dimension` on row-length mismatch,
/// `Infeasible` when the rows are inconsistent and no slack is configured,
/// `NonConvergence` if the iteration cap is exceeded.
pub fn solve_qp(p: &QPProblem) -> Result<QpSolution> {
    let m = p.u_ref.len();
    if m == 0 {
        return Err(Error::Config("QP has zero input dimension".into()));
    }
    if p.rows.is_empty() && p.bounds.is_none() {
        return Err(Error::Config(
            "QP must have at least one row or box bounds".into(),
        ));
    }
    if let Some(w) = p.slack_weight {
        if !(w > 0.0) {
            return Err(Error::Config(format!(
                "slack weight must be positive, got {w}"
            )));
        }
    }
    for (i, (a, _)) in p.rows.iter().enumerate() {
        if a.len() != m {
            return Err(Error::Dimension(format!(
                "row {i} has length {}, expected {m}",
                a.len()
            )));
        }
    }
    if let Some((lo, hi)) = &p.bounds {
        if lo.len() != m || hi.len() != m {
            return Err(Error::Dimension(format!(
                "bounds have lengths {}/{}, expected {m}",
                lo.len(),
                hi.len()
            )));
        }
        for i in 0..m {
            if lo[i] > hi[i] {
                return Err(Error::Config(format!(
                    "bound {i} inverted: [{}, {}]",
                    lo[i], hi[i]
                )));
            }
        }
    }

    // Strict attempt in u-space.
    let (normals, offsets, n_user) = build_rows(p, m, None);
    match active_set(&p.u_ref, &normals, &offsets) {
        Ok((u, lambda, active, iterations)) => {
            let kkt_residual = kkt_residual(&p.u_ref, &normals, &offsets, &u, &lambda, &active);
            Ok(QpSolution {
                u,
                slack: 0.0,
                slack_used: false,
                active: active.into_iter().filter(|&i| i < n_user).collect(),
                iterations,
                kkt_residual,
            })
        }
        Err(Error::Infeasible { row, violation }) => match p.slack_weight {
            None => Err(Error::Infeasible { row, violation }),
            Some(w) => solve_with_slack(p, m, w),
        },
        Err(e) => Err(e),
    }
}

/// Relaxed solve in the extended space `y = (u, sqrt(w) s)`, where the
/// diagonal-Hessian problem becomes a unit-Hessian projection.
fn solve_with_slack(p: &QPProblem, m: usize, w: f64) -> Result<QpSolution> {
    let sw = w.sqrt();
    let mut y0 = DVector::zeros(m + 1);
    for i in 0..m {
        y0[i] = p.u_ref[i];
    }
    let (normals, offsets, n_user) = build_rows(p, m, Some(sw));
    let (y, lambda, active, iterations) = active_set(&y0, &normals, &offsets)?;
    let u = DVector::from_iterator(m, (0..m).map(|i| y[i]));
    let slack = y[m] / sw;
    let kkt_residual = kkt_residual(&y0, &normals, &offsets, &y, &lambda, &active);
    Ok(QpSolution {
        u,
        slack,
        slack_used: slack > SLACK_REPORT_TOL,
        active: active.into_iter().filter(|&i| i < n_user).collect(),
        iterations,
        kkt_residual,
    })
}

/// Assemble constraint normals/offsets. With `slack_scale = Some(sqrt(w))`
/// the space is `(u, y_s)` with `y_s = sqrt(w) s`: user rows gain a slack
/// coefficient `1/sqrt(w)`, an `s >= 0` row is appended, and box rows keep a
/// zero slack coefficient. Returns `(normals, offsets, n_user_rows)`.
fn build_rows(
    p: &QPProblem,
    m: usize,
    slack_scale: Option<f64>,
) -> (Vec<DVector<f64>>, Vec<f64>, usize) {
    let dim = if slack_scale.is_some() { m + 1 } else { m };
    let mut normals = Vec::new();
    let mut offsets = Vec::new();
    for (a, b) in &p.rows {
        let mut c = DVector::zeros(dim);
        for i in 0..m {
            c[i] = a[i];
        }
        if let Some(sw) = slack_scale {
            c[m] = 1.0 / sw;
        }
        normals.push(c);
        offsets.push(*b);
    }
    let n_user = normals.len();
    if let Some(sw) = slack_scale {
        let mut c = DVector::zeros(dim);
        c[m] = 1.0 / sw;
        normals.push(c);
        offsets.push(0.0);
    }
    if let Some((lo, hi)) = &p.bounds {
        for i in 0..m {
            if lo[i].is_finite() {
                let mut c = DVector::zeros(dim);
                c[i] = 1.0;
                normals.push(c);
                offsets.push(lo[i]);
            }
            if hi[i].is_finite() {
                let mut c = DVector::zeros(dim);
                c[i] = -1.0;
                normals.push(c);
                offsets.push(-hi[i]);
            }
        }
    }
    (normals, offsets, n_user)
}

/// Unit-Hessian dual active-set iteration.
///
/// Returns `(x, lambda, active, iterations)` with `lambda[i]` the multiplier
/// of `active[i]`.
fn active_set(
    x0: &DVector<f64>,
    normals: &[DVector<f64>],
    offsets: &[f64],
) -> Result<(DVector<f64>, Vec<f64>, Vec<usize>, usize)> {
    let dim = x0.len();
    let max_iter = 100 * (normals.len() + dim + 1);
    let mut x = x0.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    let mut iterations = 0usize;

    'outer: loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(Error::NonConvergence {
                what: "QP active-set iteration".into(),
            });
        }
        // Most violated inactive row.
        let mut pending: Option<usize> = None;
        let mut worst = -FEASIBILITY_TOL;
        for (i, c) in normals.iter().enumerate() {
            if active.contains(&i) {
                continue;
            }
            let v = c.dot(&x) - offsets[i];
            if v < worst {
                worst = v;
                pending = Some(i);
            }
        }
        let Some(p) = pending else {
            return Ok((x, lambda, active, iterations));
        };
        let cp = &normals[p];
        let cp_norm2 = cp.norm_squared();
        let mut lam_p = 0.0_f64;

        // Inner loop: work row p into the active set (or prove inconsistency).
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::NonConvergence {
                    what: "QP active-set iteration".into(),
                });
            }
            let k = active.len();
            // r = (N'N)^{-1} N' c_p (multiplier sensitivities),
            // z = c_p - N r (projection of c_p onto the active null space).
            let (z, r) = if k == 0 {
                (cp.clone(), Vec::new())
            } else {
                let mut nmat = DMatrix::zeros(dim, k);
                for (col, &idx) in active.iter().enumerate() {
                    nmat.set_column(col, &normals[idx]);
                }
                let ntn = nmat.transpose() * &nmat;
                let rhs = nmat.transpose() * cp;
                let chol = ntn.cholesky().ok_or(Error::NonConvergence {
                    what: "QP active-set Gram factorization".into(),
                })?;
                let r_vec = chol.solve(&rhs);
                let z = cp - &nmat * &r_vec;
                (z, r_vec.iter().copied().collect())
            };
            let z_norm2 = z.norm_squared();
            let violation = offsets[p] - cp.dot(&x); // > 0 while violated

            if z_norm2 > ZERO_DIRECTION_TOL * cp_norm2 {
                // Primal step toward satisfying row p; possibly blocked by an
                // active multiplier hitting zero first.
                let t2 = violation / z_norm2;
                let mut t1 = f64::INFINITY;
                let mut blocker = None;
                for (j, &rj) in r.iter().enumerate() {
                    if rj > 1e-14 {
                        let ratio = lambda[j] / rj;
                        if ratio < t1 {
                            t1 = ratio;
                            blocker = Some(j);
                        }
                    }
                }
                let t = t2.min(t1);
                x += t * &z;
                for (j, &rj) in r.iter().enumerate() {
                    lambda[j] -= t * rj;
                }
                lam_p += t;
                if t2 <= t1 {
                    active.push(p);
                    lambda.push(lam_p);
                    continue 'outer;
                }
                let j = blocker.expect("finite t1 implies a blocking index");
                active.remove(j);
                lambda.remove(j);
            } else {
                // No primal progress possible: c_p lies in the span of the
                // active normals. Either drop a blocking row (dual step) or
                // conclude the constraints are inconsistent.
                let mut t1 = f64::INFINITY;
                let mut blocker = None;
                for (j, &rj) in r.iter().enumerate() {
                    if rj > 1e-14 {
                        let ratio = lambda[j] / rj;
                        if ratio < t1 {
                            t1 = ratio;
                            blocker = Some(j);
                        }
                    }
                }
                let Some(j) = blocker else {
                    return Err(Error::Infeasible {
                        row: p,
                        violation,
                    });
                };
                for (jj, &rj) in r.iter().enumerate() {
                    lambda[jj] -= t1 * rj;
                }
                lam_p += t1;
                active.remove(j);
                lambda.remove(j);
            }
        }
    }
}

/// Max-norm KKT residual of a candidate solution (in the solve space).
fn kkt_residual(
    x0: &DVector<f64>,
    normals: &[DVector<f64>],
    offsets: &[f64],
    x: &DVector<f64>,
    lambda: &[f64],
    active: &[usize],
) -> f64 {
    let mut stat = x - x0;
    for (j, &idx) in active.iter().enumerate() {
        stat -= lambda[j] * &normals[idx];
    }
    let mut resid = stat.amax();
    for (i, c) in normals.iter().enumerate() {
        let v = c.dot(x) - offsets[i];
        resid = resid.max(-v); // primal feasibility
        if let Some(j) = active.iter().position(|&a| a == i) {
            resid = resid.max(-lambda[j]); // dual feasibility
            resid = resid.max((lambda[j] * v).abs()); // complementarity
        }
    }
    resid.max(0.0)
}
