//! Continuous-time LQR support: Lyapunov solves and the algebraic Riccati
//! equation by Newton–Kleinman iteration.
//!
//! The reference controller relinearizes its model every step, so the Riccati
//! solve must be cheap in the common case: a warm-started solve first checks
//! whether the previous solution already satisfies the new equation, then
//! reuses the previous gain as the Newton seed (quadratic convergence, one or
//! two Lyapunov solves in practice). Cold starts build a stabilizing seed by
//! value iteration on a conservatively time-discretized Riccati recursion.
//!
//! Lyapunov equations `Acl' P + P Acl + C = 0` are solved exactly through the
//! Kronecker-product linear system `(I (x) Acl' + Acl' (x) I) vec(P) = -vec(C)`
//! (column-major `vec`), which is well within budget at these dimensions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Residual tolerance for accepting a Riccati solution (scaled by `1 + |P|`).
pub const CARE_TOL: f64 = 1e-9;

/// Eigenvalue real-part threshold for "strictly stable".
const STABILITY_MARGIN: f64 = -1e-10;

/// True when every eigenvalue of `m` has real part below the stability margin.
pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .all(|l| l.re < STABILITY_MARGIN)
}

/// Solve the continuous Lyapunov equation `a' P + P a + c = 0` for symmetric
/// `c`, returning the symmetric solution.
///
/// # Errors
///
/// `NonConvergence` when the Kronecker system is singular (eigenvalues of `a`
/// summing to zero, i.e. `a` not strictly stable/antistable).
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || c.nrows() != n || c.ncols() != n {
        return Err(Error::Dimension(format!(
            "Lyapunov operands must be square of equal size, got {}x{} and {}x{}",
            a.nrows(),
            a.ncols(),
            c.nrows(),
            c.ncols()
        )));
    }
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let m = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_column_slice(c.as_slice()) * -1.0;
    let sol = m.lu().solve(&rhs).ok_or(Error::NonConvergence {
        what: "Lyapunov Kronecker solve".into(),
    })?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

/// Max-entry residual `|a' P + P a - P b r^{-1} b' P + q|` of a candidate
/// Riccati solution.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> f64 {
    let r_chol = match r.clone().cholesky() {
        Some(c) => c,
        None => return f64::INFINITY,
    };
    let btp = b.transpose() * p;
    let rinv_btp = r_chol.solve(&btp);
    (a.transpose() * p + p * a - btp.transpose() * rinv_btp + q).amax()
}

/// Solve the continuous algebraic Riccati equation
/// `a' P + P a - P b r^{-1} b' P + q = 0` for the stabilizing `P` by
/// Newton–Kleinman iteration, optionally warm-started from a previous
/// solution.
///
/// # Errors
///
/// `Config` if `r` is not positive definite; `NonConvergence` if no
/// stabilizing seed can be built or the iteration fails to reach
/// [`CARE_TOL`].
pub fn care_newton_kleinman(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    warm: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimension(
            "CARE operand dimensions are inconsistent".into(),
        ));
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(Error::Dimension(format!(
            "R is {}x{}, expected {m}x{m}",
            r.nrows(),
            r.ncols()
        )));
    }
    let r_chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Config("LQR input weight R must be positive definite".into()))?;
    let gain_of = |p: &DMatrix<f64>| r_chol.solve(&(b.transpose() * p));

    // Fast path: the warm solution may still satisfy the (slightly moved)
    // equation to tolerance.
    if let Some(p0) = warm {
        if p0.nrows() == n
            && p0.ncols() == n
            && care_residual(a, b, q, r, p0) <= CARE_TOL * (1.0 + p0.amax())
            && is_hurwitz(&(a - b * gain_of(p0)))
        {
            return Ok(p0.clone());
        }
    }

    let mut k = match warm {
        Some(p0) if p0.nrows() == n && p0.ncols() == n => {
            let k0 = gain_of(p0);
            if is_hurwitz(&(a - b * &k0)) {
                k0
            } else {
                stabilizing_gain(a, b, q, r, &r_chol)?
            }
        }
        _ => stabilizing_gain(a, b, q, r, &r_chol)?,
    };

    for _ in 0..60 {
        let acl = a - b * &k;
        if !is_hurwitz(&acl) {
            return Err(Error::NonConvergence {
                what: "Newton-Kleinman iterate lost stability".into(),
            });
        }
        let c = q + k.transpose() * r * &k;
        let p = solve_lyapunov(&acl, &c)?;
        let res = care_residual(a, b, q, r, &p);
        k = gain_of(&p);
        if res <= CARE_TOL * (1.0 + p.amax()) {
            return Ok(p);
        }
    }
    Err(Error::NonConvergence {
        what: "Newton-Kleinman Riccati iteration".into(),
    })
}

/// Convenience wrapper returning `(K, P)` with `K = r^{-1} b' P`.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    warm: Option<&DMatrix<f64>>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = care_newton_kleinman(a, b, q, r, warm)?;
    let r_chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Config("LQR input weight R must be positive definite".into()))?;
    let k = r_chol.solve(&(b.transpose() * &p));
    Ok((k, p))
}

/// Build a stabilizing gain by value iteration on the Riccati difference
/// equation of a conservative explicit-Euler discretization.
fn stabilizing_gain(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    r_chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let tau = 0.1 / (1.0 + a.amax());
    let ad = DMatrix::identity(n, n) + a * tau;
    let bd = b * tau;
    let qd = q * tau + DMatrix::identity(n, n) * 1e-12;
    let rd = r * tau;

    let mut p = qd.clone();
    for _ in 0..200_000 {
        let btp = bd.transpose() * &p;
        let gram = &rd + &btp * &bd;
        let gram_chol = gram.cholesky().ok_or(Error::NonConvergence {
            what: "value-iteration Gram factorization".into(),
        })?;
        let btpa = &btp * &ad;
        let kd = gram_chol.solve(&btpa);
        let p_next = &qd + ad.transpose() * &p * &ad - btpa.transpose() * kd;
        let p_next = (&p_next + p_next.transpose()) * 0.5;
        let diff = (&p_next - &p).amax();
        p = p_next;
        if diff <= 1e-11 * (1.0 + p.amax()) {
            break;
        }
    }
    let k = r_chol.solve(&(b.transpose() * &p));
    if is_hurwitz(&(a - b * &k)) {
        Ok(k)
    } else {
        Err(Error::NonConvergence {
            what: "stabilizing-gain initialization".into(),
        })
    }
}
