//! Independent reference implementations shared by the integration suites.
//!
//! Everything in this module is deliberately rebuilt from first principles —
//! quadrature for the error function, bisection for its inverse, subset
//! enumeration for quadratic programs, information-form conditioning, and a
//! local Runge-Kutta integrator for belief flows — so that agreement with the
//! library is evidence, not tautology. Oracles favor transparency over speed.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

use bcbf::SystemModel;

/// Panels for the composite Simpson rule behind [`erf_oracle`]. The rule's
/// error scales as `h^4`, so this keeps quadrature error near 1e-14 for
/// arguments up to 6.
const SIMPSON_PANELS: usize = 16_384;

/// Gaussian error function by composite Simpson quadrature of its defining
/// integral; |x| > 6 saturates to ±1 (the tail is below 2e-17 there).
pub fn erf_oracle(x: f64) -> f64 {
    if x < 0.0 {
        return -erf_oracle(-x);
    }
    if x > 6.0 {
        return 1.0;
    }
    if x == 0.0 {
        return 0.0;
    }
    let n = SIMPSON_PANELS;
    let h = x / n as f64;
    let f = |t: f64| (-t * t).exp();
    // Kahan-compensated accumulation: the inverse-function tests amplify
    // tail errors by e^{y^2}, so plain summation roundoff would dominate.
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    let add = |v: f64, sum: &mut f64, comp: &mut f64| {
        let y = v - *comp;
        let t = *sum + y;
        *comp = (t - *sum) - y;
        *sum = t;
    };
    add(f(0.0) + f(x), &mut sum, &mut comp);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        add(w * f(i as f64 * h), &mut sum, &mut comp);
    }
    let integral = sum * h / 3.0;
    2.0 / std::f64::consts::PI.sqrt() * integral
}

/// Inverse error function by bisection on [`erf_oracle`]; `p` must lie in
/// (-1, 1).
pub fn erfinv_oracle(p: f64) -> f64 {
    assert!(p.abs() < 1.0, "erfinv oracle domain is (-1, 1), got {p}");
    if p < 0.0 {
        return -erfinv_oracle(-p);
    }
    let (mut lo, mut hi) = (0.0_f64, 6.0_f64);
    // 80 halvings of [0, 6] land well below f64 spacing near the root.
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if erf_oracle(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Standard normal CDF through [`erf_oracle`].
pub fn gauss_cdf_oracle(x: f64) -> f64 {
    0.5 * (1.0 + erf_oracle(x / std::f64::consts::SQRT_2))
}

/// Central finite difference of a scalar function.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central second finite difference of a scalar function.
pub fn central_diff2(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

/// Euclidean projection of `y0` onto `{y : a_i' y >= b_i}` by enumerating
/// every candidate active subset and solving its equality-constrained
/// stationarity system. Returns `None` when no subset yields a feasible
/// KKT point (the polytope is empty up to the tolerance). Exponential in the
/// number of rows — intended for small reference problems only.
pub fn project_polytope_oracle(
    y0: &DVector<f64>,
    rows: &[(DVector<f64>, f64)],
    tol: f64,
) -> Option<DVector<f64>> {
    let m = rows.len();
    assert!(m <= 20, "subset enumeration over {m} rows is unreasonable");
    let mut best: Option<(f64, DVector<f64>)> = None;
    'subsets: for mask in 0..(1_u32 << m) {
        let idx: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        let k = idx.len();
        let y = if k == 0 {
            y0.clone()
        } else {
            // Stationarity with equality rows A y = b: y = y0 + A' lambda,
            // A A' lambda = b - A y0, and lambda must be nonnegative.
            let a = DMatrix::from_fn(k, y0.len(), |r, c| rows[idx[r]].0[c]);
            let b = DVector::from_fn(k, |r, _| rows[idx[r]].1);
            let gram = &a * a.transpose();
            let rhs = &b - &a * y0;
            let lambda = match gram.clone().lu().solve(&rhs) {
                Some(l) => l,
                None => continue 'subsets,
            };
            if (&gram * &lambda - &rhs).amax() > tol {
                continue 'subsets; // singular/inconsistent subset
            }
            if lambda.iter().any(|&l| l < -tol) {
                continue 'subsets;
            }
            y0 + a.transpose() * lambda
        };
        for (a, b) in rows {
            if a.dot(&y) < b - tol {
                continue 'subsets;
            }
        }
        let obj = (&y - y0).norm_squared();
        if best.as_ref().is_none_or(|(o, _)| obj < *o) {
            best = Some((obj, y));
        }
    }
    best.map(|(_, y)| y)
}

/// Gaussian conditioning on a linear observation `z = H x + v`,
/// `v ~ N(0, R)`, in information form: the posterior precision is the prior
/// precision plus `H' R^{-1} H`.
pub fn condition_gaussian_oracle(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    z: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let prec_prior = sigma
        .clone()
        .try_inverse()
        .expect("oracle prior covariance must be invertible");
    let r_inv = r
        .clone()
        .try_inverse()
        .expect("oracle measurement covariance must be invertible");
    let prec_post = &prec_prior + h.transpose() * &r_inv * h;
    let sigma_post = prec_post
        .try_inverse()
        .expect("oracle posterior precision must be invertible");
    let mu_post = &sigma_post * (&prec_prior * mu + h.transpose() * &r_inv * z);
    (mu_post, sigma_post)
}

/// Closed-form variance of a scalar linear diffusion `dx = a x dt + dw`,
/// `Var(dw) = q dt`, after time `t` from initial variance `s0`.
pub fn scalar_variance_flow(a: f64, q: f64, s0: f64, t: f64) -> f64 {
    if a.abs() < 1e-300 {
        return s0 + q * t;
    }
    let e = (2.0 * a * t).exp();
    e * s0 + q * (2.0 * a * t).exp_m1() / (2.0 * a)
}

/// Closed-form mean of a scalar linear system `x_dot = a x + c` (constant
/// forcing) after time `t` from `x0`.
pub fn scalar_mean_flow(a: f64, c: f64, x0: f64, t: f64) -> f64 {
    if a.abs() < 1e-300 {
        return x0 + c * t;
    }
    (a * t).exp() * x0 + c * (a * t).exp_m1() / a
}

/// Belief state used by the local reference integrator.
#[derive(Clone)]
pub struct OracleBelief {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Time derivative of the extended Kalman belief under constant input `u`:
/// the mean follows the controlled vector field and the covariance follows
/// the Lyapunov flow of the state Jacobian at `(mu, u)`.
fn oracle_belief_rate(b: &OracleBelief, model: &SystemModel, u: &DVector<f64>) -> OracleBelief {
    let mu_dot = model.xdot(&b.mu, u);
    let a = model.jacobian_f64(&b.mu, u);
    let sigma_dot = &a * &b.sigma + &b.sigma * a.transpose() + model.q();
    OracleBelief {
        mu: mu_dot,
        sigma: sigma_dot,
    }
}

fn oracle_belief_axpy(b: &OracleBelief, s: f64, d: &OracleBelief) -> OracleBelief {
    OracleBelief {
        mu: &b.mu + s * &d.mu,
        sigma: &b.sigma + s * &d.sigma,
    }
}

/// Classical fourth-order Runge-Kutta flow of the belief ODE, written here
/// independently of the library's propagation code.
pub fn flow_belief_oracle(
    b: &OracleBelief,
    model: &SystemModel,
    u: &DVector<f64>,
    t: f64,
    steps: usize,
) -> OracleBelief {
    let dt = t / steps as f64;
    let mut cur = b.clone();
    for _ in 0..steps {
        let k1 = oracle_belief_rate(&cur, model, u);
        let k2 = oracle_belief_rate(&oracle_belief_axpy(&cur, dt / 2.0, &k1), model, u);
        let k3 = oracle_belief_rate(&oracle_belief_axpy(&cur, dt / 2.0, &k2), model, u);
        let k4 = oracle_belief_rate(&oracle_belief_axpy(&cur, dt, &k3), model, u);
        let mut next = cur.clone();
        next.mu += dt / 6.0 * (&k1.mu + 2.0 * &k2.mu + 2.0 * &k3.mu + &k4.mu);
        next.sigma += dt / 6.0 * (&k1.sigma + 2.0 * &k2.sigma + 2.0 * &k3.sigma + &k4.sigma);
        cur = next;
    }
    cur
}

/// Value-at-risk barrier evaluated from its definition, written with the
/// local quadrature-and-bisection special functions: signed mean clearance
/// minus the `1 - delta` Gaussian quantile of the directional deviation,
/// minus the jump margin.
pub fn var_barrier_oracle(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    alpha: &DVector<f64>,
    beta: f64,
    delta: f64,
    gamma: f64,
) -> f64 {
    let dir_var = alpha.dot(&(sigma * alpha)).max(0.0);
    let quantile = erfinv_oracle(1.0 - 2.0 * delta);
    alpha.dot(mu) - beta - quantile * (2.0 * dir_var).sqrt() - gamma
}

/// Mean and population standard deviation of a sample.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standard error of a Bernoulli frequency estimate `p_hat` over `n` trials.
pub fn binomial_se(p_hat: f64, n: usize) -> f64 {
    (p_hat * (1.0 - p_hat) / n as f64).sqrt()
}
