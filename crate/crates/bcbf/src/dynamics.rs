//! Hybrid belief dynamics: continuous EKF mean/covariance flow in
//! control-affine form, and the stochastic discrete-time Kalman jump.
//!
//! Between measurements the belief obeys the ODE
//!
//! ```text
//! mu_dot    = f(mu) + g(mu) u
//! Sigma_dot = A Sigma + Sigma A' + Q,   A = d/dx [f(x) + g(x)u] at (mu, u)
//! ```
//!
//! which is control-affine in the flat belief coordinates:
//! `b_dot = f_b(b) + g_b(b) u` ([`belief_affine_parts`]). At a measurement the
//! belief jumps through the Kalman update ([`kalman_update`]); the covariance
//! of that jump's mean increment is [`innovation_covariance`]. [`hybrid_step`]
//! composes one integration step of the flow with an optional jump.
//!
//! System models expose drift, input map, and Jacobian as closures over
//! [`Dual`] scalars so the same definitions serve plain evaluation and the
//! directional differentiation needed for second-order barrier constraints.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{belief_len, cov_index, symmetrize, BeliefVector, GaussianBelief};
use crate::dual::{lift_matrix, lift_vector, value_matrix, value_vector, Dual};
use crate::error::{Error, Result};

/// Condition-number guard for the innovation covariance inversion.
pub const INNOVATION_CONDITION_LIMIT: f64 = 1e12;

/// Vector field of `Dual` closures: `x -> f(x)`.
pub type DualVectorField = Box<dyn Fn(&DVector<Dual>) -> DVector<Dual> + Send + Sync>;
/// Matrix field of `Dual` closures: `x -> g(x)`.
pub type DualMatrixField = Box<dyn Fn(&DVector<Dual>) -> DMatrix<Dual> + Send + Sync>;
/// State-and-input Jacobian field: `(x, u) -> A(x, u)`.
pub type DualJacobianField =
    Box<dyn Fn(&DVector<Dual>, &DVector<Dual>) -> DMatrix<Dual> + Send + Sync>;

/// Control-affine stochastic system `x_dot = f(x) + g(x) u + w`, `w ~ N(0, Q)`.
///
/// `jacobian(x, u)` must be the Jacobian of the *closed* vector field
/// `f(x) + g(x) u` — including the input-dependent part of `g` — so the
/// covariance flow sees the full linearization. For constant `g` it reduces
/// to `df/dx`. The Jacobian is affine in `u` by construction.
pub struct SystemModel {
    n: usize,
    m: usize,
    drift: DualVectorField,
    input_map: DualMatrixField,
    jacobian: DualJacobianField,
    q: DMatrix<f64>,
    q_sqrt: DMatrix<f64>,
}

impl SystemModel {
    /// Validated constructor. Checks `Q` is symmetric PSD with the belief
    /// tolerances and probes the closures once for dimensional consistency.
    pub fn new(
        n: usize,
        m: usize,
        drift: DualVectorField,
        input_map: DualMatrixField,
        jacobian: DualJacobianField,
        q: DMatrix<f64>,
    ) -> Result<Self> {
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::Dimension(format!(
                "Q is {}x{}, expected {n}x{n}",
                q.nrows(),
                q.ncols()
            )));
        }
        let mut max_asym = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                max_asym = max_asym.max((q[(i, j)] - q[(j, i)]).abs());
            }
        }
        if max_asym > crate::belief::ASYMMETRY_TOL {
            return Err(Error::Domain(format!(
                "Q asymmetry {max_asym:.3e} exceeds tolerance"
            )));
        }
        let q = symmetrize(&q);
        crate::belief::check_psd(&q)?;
        let q_sqrt = psd_sqrt(&q);

        let probe = DVector::from_element(n, Dual::constant(0.0));
        let u0 = DVector::from_element(m, Dual::constant(0.0));
        let f = drift(&probe);
        if f.len() != n {
            return Err(Error::Dimension(format!(
                "drift returns length {}, expected {n}",
                f.len()
            )));
        }
        let g = input_map(&probe);
        if g.nrows() != n || g.ncols() != m {
            return Err(Error::Dimension(format!(
                "input map returns {}x{}, expected {n}x{m}",
                g.nrows(),
                g.ncols()
            )));
        }
        let a = jacobian(&probe, &u0);
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::Dimension(format!(
                "jacobian returns {}x{}, expected {n}x{n}",
                a.nrows(),
                a.ncols()
            )));
        }
        Ok(SystemModel {
            n,
            m,
            drift,
            input_map,
            jacobian,
            q,
            q_sqrt,
        })
    }

    /// Linear time-invariant model `x_dot = A x + B u + w`.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        if a.ncols() != n || b.nrows() != n {
            return Err(Error::Dimension(format!(
                "A is {}x{}, B is {}x{}: incompatible",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        let a_dual = lift_matrix(&a);
        let b_dual = lift_matrix(&b);
        let a_for_jac = a_dual.clone();
        Self::new(
            n,
            m,
            Box::new(move |x| &a_dual * x),
            Box::new(move |_| b_dual.clone()),
            Box::new(move |_, _| a_for_jac.clone()),
            q,
        )
    }

    /// State dimension.
    #[inline]
    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// Input dimension.
    #[inline]
    pub fn input_dim(&self) -> usize {
        self.m
    }

    /// Motion-noise covariance `Q`.
    #[inline]
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    /// A matrix `L` with `L L' = Q` (symmetric PSD square root).
    #[inline]
    pub fn noise_sqrt(&self) -> &DMatrix<f64> {
        &self.q_sqrt
    }

    /// Drift over duals.
    #[inline]
    pub fn drift_dual(&self, x: &DVector<Dual>) -> DVector<Dual> {
        (self.drift)(x)
    }

    /// Input map over duals.
    #[inline]
    pub fn input_map_dual(&self, x: &DVector<Dual>) -> DMatrix<Dual> {
        (self.input_map)(x)
    }

    /// Jacobian `A(x, u)` over duals.
    #[inline]
    pub fn jacobian_dual(&self, x: &DVector<Dual>, u: &DVector<Dual>) -> DMatrix<Dual> {
        (self.jacobian)(x, u)
    }

    /// Drift at an `f64` state.
    pub fn drift_f64(&self, x: &DVector<f64>) -> DVector<f64> {
        value_vector(&(self.drift)(&lift_vector(x)))
    }

    /// Input map at an `f64` state.
    pub fn input_map_f64(&self, x: &DVector<f64>) -> DMatrix<f64> {
        value_matrix(&(self.input_map)(&lift_vector(x)))
    }

    /// Jacobian at `f64` state and input.
    pub fn jacobian_f64(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        value_matrix(&(self.jacobian)(&lift_vector(x), &lift_vector(u)))
    }

    /// Closed vector field `f(x) + g(x) u`.
    pub fn xdot(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift_f64(x) + self.input_map_f64(x) * u
    }
}

/// Symmetric PSD square root via eigendecomposition (valid for singular
/// matrices; negative dust is clamped to zero).
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let sqrt_l = DVector::from_iterator(
        m.nrows(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_l) * eig.eigenvectors.transpose()
}

/// Discrete sensor `z = ell(x) + v`, `v ~ N(0, R)`, sampled at `rate_hz`.
pub struct ObservationModel {
    l: usize,
    observe: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    jacobian: Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    r: DMatrix<f64>,
    r_sqrt: DMatrix<f64>,
    rate_hz: f64,
}

impl ObservationModel {
    /// Validated constructor: `R` must be symmetric positive definite and the
    /// rate strictly positive.
    pub fn new(
        l: usize,
        observe: Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
        jacobian: Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
        r: DMatrix<f64>,
        rate_hz: f64,
    ) -> Result<Self> {
        if r.nrows() != l || r.ncols() != l {
            return Err(Error::Dimension(format!(
                "R is {}x{}, expected {l}x{l}",
                r.nrows(),
                r.ncols()
            )));
        }
        if !(rate_hz > 0.0) {
            return Err(Error::Config(format!(
                "sensor rate must be positive, got {rate_hz}"
            )));
        }
        let r = symmetrize(&r);
        if r.clone().cholesky().is_none() {
            return Err(Error::Config(
                "measurement noise R must be positive definite".into(),
            ));
        }
        let r_sqrt = psd_sqrt(&r);
        Ok(ObservationModel {
            l,
            observe,
            jacobian,
            r,
            r_sqrt,
            rate_hz,
        })
    }

    /// Linear sensor `z = H x + v`.
    pub fn linear(h: DMatrix<f64>, r: DMatrix<f64>, rate_hz: f64) -> Result<Self> {
        let l = h.nrows();
        let h_obs = h.clone();
        Self::new(
            l,
            Box::new(move |x| &h_obs * x),
            Box::new(move |_| h.clone()),
            r,
            rate_hz,
        )
    }

    /// Measurement dimension.
    #[inline]
    pub fn meas_dim(&self) -> usize {
        self.l
    }

    /// Evaluate `ell(x)`.
    #[inline]
    pub fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.observe)(x)
    }

    /// Evaluate the Jacobian `H(x)`.
    #[inline]
    pub fn jacobian_at(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.jacobian)(x)
    }

    /// Measurement noise covariance.
    #[inline]
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// A matrix `L` with `L L' = R`.
    #[inline]
    pub fn noise_sqrt(&self) -> &DMatrix<f64> {
        &self.r_sqrt
    }

    /// Sampling frequency in Hz.
    #[inline]
    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }
}

/// Fixed-step integrators for the belief flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    /// Classical fourth-order Runge-Kutta (default).
    #[default]
    Rk4,
    /// Explicit Euler, for parity with resource-constrained deployments.
    Euler,
}

/// Time derivative of the flat belief under input `u`:
/// `[f(mu) + g(mu) u ; vec(A Sigma + Sigma A' + Q)]` with `A = A(mu, u)`.
pub fn belief_flow(b: &GaussianBelief, model: &SystemModel, u: &DVector<f64>) -> Result<BeliefVector> {
    let n = model.state_dim();
    if b.dim() != n {
        return Err(Error::Dimension(format!(
            "belief dimension {} does not match model state dimension {n}",
            b.dim()
        )));
    }
    if u.len() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "input length {} does not match model input dimension {}",
            u.len(),
            model.input_dim()
        )));
    }
    let mu_dot = model.xdot(b.mean(), u);
    let a = model.jacobian_f64(b.mean(), u);
    let sigma_dot = &a * b.cov() + b.cov() * a.transpose() + model.q();
    Ok(pack_flow(n, &mu_dot, &sigma_dot))
}

/// Control-affine decomposition of the belief flow: returns `(f_b, g_b)` with
/// `belief_flow(b, u) = f_b + g_b u` exactly. Column `j` of `g_b` pairs the
/// `j`-th input direction `g(mu) e_j` with the covariance sensitivity
/// `G_j Sigma + Sigma G_j'` where `G_j = A(mu, e_j) - A(mu, 0)` (exact
/// because `A` is affine in `u`).
pub fn belief_affine_parts(
    b: &GaussianBelief,
    model: &SystemModel,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = model.state_dim();
    let m = model.input_dim();
    if b.dim() != n {
        return Err(Error::Dimension(format!(
            "belief dimension {} does not match model state dimension {n}",
            b.dim()
        )));
    }
    let nb = belief_len(n);
    let mu = b.mean();
    let zero_u = DVector::zeros(m);

    let f_mu = model.drift_f64(mu);
    let a0 = model.jacobian_f64(mu, &zero_u);
    let f_sigma = &a0 * b.cov() + b.cov() * a0.transpose() + model.q();
    let f_b = pack_flow(n, &f_mu, &f_sigma).into_vector();

    let g_mu = model.input_map_f64(mu);
    let mut g_b = DMatrix::zeros(nb, m);
    for j in 0..m {
        let mut ej = DVector::zeros(m);
        ej[j] = 1.0;
        let gj = model.jacobian_f64(mu, &ej) - &a0;
        let g_sigma_j = &gj * b.cov() + b.cov() * gj.transpose();
        for i in 0..n {
            g_b[(i, j)] = g_mu[(i, j)];
        }
        for r in 0..n {
            for c in r..n {
                g_b[(cov_index(n, r, c), j)] = g_sigma_j[(r, c)];
            }
        }
    }
    Ok((f_b, g_b))
}

/// Kalman gain and innovation covariance `(K, S)` at the prior belief:
/// `S = H Sigma H' + R`, `K = Sigma H' S^{-1}`.
///
/// # Errors
///
/// `SingularInnovation` when `S` is not positive definite or its spectral
/// condition number exceeds [`INNOVATION_CONDITION_LIMIT`].
pub fn kalman_gain(
    b: &GaussianBelief,
    obs: &ObservationModel,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let h = obs.jacobian_at(b.mean());
    if h.ncols() != b.dim() || h.nrows() != obs.meas_dim() {
        return Err(Error::Dimension(format!(
            "H is {}x{}, expected {}x{}",
            h.nrows(),
            h.ncols(),
            obs.meas_dim(),
            b.dim()
        )));
    }
    let s = symmetrize(&(&h * b.cov() * h.transpose() + obs.r()));
    let eigs = s.clone().symmetric_eigen().eigenvalues;
    let min = eigs.min();
    let max = eigs.max();
    if min <= 0.0 {
        return Err(Error::SingularInnovation {
            condition: f64::INFINITY,
        });
    }
    let condition = max / min;
    if condition > INNOVATION_CONDITION_LIMIT {
        return Err(Error::SingularInnovation { condition });
    }
    let chol = s.clone().cholesky().ok_or(Error::SingularInnovation {
        condition: f64::INFINITY,
    })?;
    // K' = S^{-1} H Sigma  (S symmetric), so K = (S \ (H Sigma))'.
    let k = chol.solve(&(&h * b.cov())).transpose();
    Ok((k, s))
}

/// Discrete-time Kalman (EKF) measurement update.
///
/// `mu+ = mu- + K (z - ell(mu-))`, `Sigma+ = (I - K H) Sigma-` symmetrized.
/// The posterior covariance never exceeds the prior (`Sigma+ <= Sigma-` in
/// the Loewner order, hence also in trace).
pub fn kalman_update(
    b: &GaussianBelief,
    obs: &ObservationModel,
    z: &DVector<f64>,
) -> Result<GaussianBelief> {
    if z.len() != obs.meas_dim() {
        return Err(Error::Dimension(format!(
            "measurement length {} does not match sensor dimension {}",
            z.len(),
            obs.meas_dim()
        )));
    }
    let (k, _s) = kalman_gain(b, obs)?;
    let h = obs.jacobian_at(b.mean());
    let innovation = z - obs.observe(b.mean());
    let mu_plus = b.mean() + &k * innovation;
    let n = b.dim();
    let sigma_plus = (DMatrix::identity(n, n) - &k * h) * b.cov();
    GaussianBelief::new(mu_plus, symmetrize(&sigma_plus))
}

/// Covariance `Lambda = K S K'` of the mean jump `K (z - ell(mu-))` when the
/// measurement is drawn from the belief-consistent distribution
/// `z ~ N(ell(mu-), S)`.
pub fn innovation_covariance(b: &GaussianBelief, obs: &ObservationModel) -> Result<DMatrix<f64>> {
    let (k, s) = kalman_gain(b, obs)?;
    Ok(symmetrize(&(&k * s * k.transpose())))
}

/// One hybrid step: integrate the belief flow over `dt` with RK4, then apply
/// the Kalman update iff `maybe_z` carries a measurement.
pub fn hybrid_step(
    b: &GaussianBelief,
    model: &SystemModel,
    obs: &ObservationModel,
    u: &DVector<f64>,
    dt: f64,
    maybe_z: Option<&DVector<f64>>,
) -> Result<GaussianBelief> {
    hybrid_step_with(Integrator::Rk4, b, model, obs, u, dt, maybe_z)
}

/// [`hybrid_step`] with an explicit integrator choice.
pub fn hybrid_step_with(
    integrator: Integrator,
    b: &GaussianBelief,
    model: &SystemModel,
    obs: &ObservationModel,
    u: &DVector<f64>,
    dt: f64,
    maybe_z: Option<&DVector<f64>>,
) -> Result<GaussianBelief> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let n = b.dim();
    let b0 = b.to_vec().into_vector();
    let flowed = match integrator {
        Integrator::Euler => {
            let k1 = belief_flow(b, model, u)?.into_vector();
            reconstruct(n, &b0 + dt * k1)?
        }
        Integrator::Rk4 => {
            let k1 = belief_flow(b, model, u)?.into_vector();
            let b2 = reconstruct(n, &b0 + (0.5 * dt) * &k1)?;
            let k2 = belief_flow(&b2, model, u)?.into_vector();
            let b3 = reconstruct(n, &b0 + (0.5 * dt) * &k2)?;
            let k3 = belief_flow(&b3, model, u)?.into_vector();
            let b4 = reconstruct(n, &b0 + dt * &k3)?;
            let k4 = belief_flow(&b4, model, u)?.into_vector();
            reconstruct(n, &b0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))?
        }
    };
    match maybe_z {
        Some(z) => kalman_update(&flowed, obs, z),
        None => Ok(flowed),
    }
}

/// Rebuild a validated belief from flat coordinates.
fn reconstruct(n: usize, data: DVector<f64>) -> Result<GaussianBelief> {
    BeliefVector::new(n, data)?.to_belief()
}

/// Pack `(mu_dot, Sigma_dot)` into the flat layout.
fn pack_flow(n: usize, mu_dot: &DVector<f64>, sigma_dot: &DMatrix<f64>) -> BeliefVector {
    let mut data = DVector::zeros(belief_len(n));
    for i in 0..n {
        data[i] = mu_dot[i];
    }
    for i in 0..n {
        for j in i..n {
            data[cov_index(n, i, j)] = 0.5 * (sigma_dot[(i, j)] + sigma_dot[(j, i)]);
        }
    }
    BeliefVector::new(n, data).expect("length is belief_len(n) by construction")
}
