//! Concrete system and observation models plus reference controllers: a
//! planar unicycle with full-state EKF sensing, a linear double-integrator
//! drone with position- or velocity-only sensing, circular-obstacle
//! half-space linearization, an LQR point tracker, and a scripted
//! adversarial reference policy.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::belief::{GaussianBelief, RiskHalfSpace};
use crate::dual::Dual;
use crate::dynamics::{ObservationModel, SystemModel};
use crate::error::{Error, Result};
use crate::riccati::lqr_gain;

/// Mean-to-center distances at or below this make the obstacle direction
/// undefined.
pub const OBSTACLE_CENTER_TOL: f64 = 1e-9;

/// Speed floor used when linearizing the unicycle for LQR design; keeps the
/// lateral channel controllable at standstill.
pub const UNICYCLE_SPEED_FLOOR: f64 = 0.1;

// ---------------------------------------------------------------------------
// Unicycle
// ---------------------------------------------------------------------------

/// Closed unicycle vector field at `(x, u)`:
/// state `(p_x, p_y, v, phi)`, inputs `(a, omega)`,
/// `x_dot = (v cos phi, v sin phi, a, omega)`.
pub fn unicycle_dynamics(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let (v, phi) = (x[2], x[3]);
    DVector::from_vec(vec![v * phi.cos(), v * phi.sin(), u[0], u[1]])
}

/// Jacobian of the closed unicycle field with respect to the state. The
/// input map is constant, so the result is independent of `u`.
pub fn unicycle_jacobian(x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
    let (v, phi) = (x[2], x[3]);
    let mut a = DMatrix::zeros(4, 4);
    a[(0, 2)] = phi.cos();
    a[(0, 3)] = -v * phi.sin();
    a[(1, 2)] = phi.sin();
    a[(1, 3)] = v * phi.cos();
    a
}

fn unicycle_jacobian_dual(x: &DVector<Dual>) -> DMatrix<Dual> {
    let (v, phi) = (x[2], x[3]);
    let mut a = DMatrix::from_element(4, 4, Dual::constant(0.0));
    a[(0, 2)] = phi.cos();
    a[(0, 3)] = -(v * phi.sin());
    a[(1, 2)] = phi.sin();
    a[(1, 3)] = v * phi.cos();
    a
}

/// Unicycle with a custom motion-noise covariance.
pub fn unicycle_model_with_noise(q: DMatrix<f64>) -> Result<SystemModel> {
    let input_map = {
        let mut g = DMatrix::from_element(4, 2, Dual::constant(0.0));
        g[(2, 0)] = Dual::constant(1.0);
        g[(3, 1)] = Dual::constant(1.0);
        g
    };
    SystemModel::new(
        4,
        2,
        Box::new(|x: &DVector<Dual>| {
            let (v, phi) = (x[2], x[3]);
            DVector::from_vec(vec![
                v * phi.cos(),
                v * phi.sin(),
                Dual::constant(0.0),
                Dual::constant(0.0),
            ])
        }),
        Box::new(move |_| input_map.clone()),
        Box::new(|x, _u| unicycle_jacobian_dual(x)),
        q,
    )
}

/// Unicycle with the default motion noise
/// `Q = diag(0.1^2, 0.1^2, 0.005^2, 0.005^2)`.
pub fn unicycle_model() -> SystemModel {
    unicycle_model_with_noise(DMatrix::from_diagonal(&DVector::from_vec(vec![
        0.01, 0.01, 2.5e-5, 2.5e-5,
    ])))
    .expect("default unicycle noise is valid")
}

/// Full-state unicycle sensor with custom noise and rate.
pub fn unicycle_observation_with(r: DMatrix<f64>, rate_hz: f64) -> Result<ObservationModel> {
    ObservationModel::linear(DMatrix::identity(4, 4), r, rate_hz)
}

/// Default full-state unicycle sensor:
/// `R = diag(0.2^2, 0.2^2, 0.1^2, 0.1^2)` at 10 Hz.
pub fn unicycle_observation() -> ObservationModel {
    unicycle_observation_with(
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.04, 0.04, 0.01, 0.01])),
        10.0,
    )
    .expect("default unicycle sensor is valid")
}

// ---------------------------------------------------------------------------
// Double integrator / drone
// ---------------------------------------------------------------------------

/// `d`-dimensional double integrator: state `(p, p_dot)`, inputs are
/// accelerations, isotropic motion noise with the given variance.
pub fn double_integrator(d: usize, noise_var: f64) -> Result<SystemModel> {
    if d == 0 {
        return Err(Error::Config("double integrator needs d >= 1".into()));
    }
    let n = 2 * d;
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, d);
    for i in 0..d {
        a[(i, d + i)] = 1.0;
        b[(d + i, i)] = 1.0;
    }
    SystemModel::linear(a, b, DMatrix::identity(n, n) * noise_var)
}

/// Drone model: 3-D double integrator with per-axis motion noise `0.05^2`.
pub fn drone_model() -> SystemModel {
    double_integrator(3, 0.0025).expect("drone parameters are valid")
}

/// Position-only drone sensor (`z = p + v`, `R = 0.2^2 I`).
pub fn drone_position_observation(rate_hz: f64) -> Result<ObservationModel> {
    let mut h = DMatrix::zeros(3, 6);
    for i in 0..3 {
        h[(i, i)] = 1.0;
    }
    ObservationModel::linear(h, DMatrix::identity(3, 3) * 0.04, rate_hz)
}

/// Velocity-only drone sensor (`z = p_dot + v`, `R = 0.2^2 I`). Position is
/// unobservable under this sensor; its covariance grows without bound.
pub fn drone_velocity_observation(rate_hz: f64) -> Result<ObservationModel> {
    let mut h = DMatrix::zeros(3, 6);
    for i in 0..3 {
        h[(i, 3 + i)] = 1.0;
    }
    ObservationModel::linear(h, DMatrix::identity(3, 3) * 0.04, rate_hz)
}

// ---------------------------------------------------------------------------
// Obstacle linearization
// ---------------------------------------------------------------------------

/// Half-space linearization of a circular/spherical obstacle at the current
/// mean: `alpha = (mu_pos - c)/||mu_pos - c||` embedded in the leading
/// (position) coordinates, `beta = alpha' c + r`. The linearized constraint
/// `alpha' x >= beta` is a strict over-approximation of staying outside the
/// obstacle, so enforcing it is conservative.
///
/// # Errors
///
/// `Domain` when the mean is within [`OBSTACLE_CENTER_TOL`] of the center
/// (direction undefined); `Dimension` when the center has more coordinates
/// than the state.
pub fn obstacle_halfspace(
    b: &GaussianBelief,
    center: &DVector<f64>,
    radius: f64,
    delta: f64,
) -> Result<RiskHalfSpace> {
    let n = b.dim();
    let p = center.len();
    if p > n {
        return Err(Error::Dimension(format!(
            "obstacle center has {p} coordinates but the state has {n}"
        )));
    }
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!(
            "obstacle radius must be finite and nonnegative, got {radius}"
        )));
    }
    let mu = b.mean();
    let mut dist2 = 0.0;
    for i in 0..p {
        let d = mu[i] - center[i];
        dist2 += d * d;
    }
    let dist = dist2.sqrt();
    if dist <= OBSTACLE_CENTER_TOL {
        return Err(Error::Domain(
            "mean position coincides with the obstacle center".into(),
        ));
    }
    let mut alpha = DVector::zeros(n);
    for i in 0..p {
        alpha[i] = (mu[i] - center[i]) / dist;
    }
    let beta = (0..p).map(|i| alpha[i] * center[i]).sum::<f64>() + radius;
    RiskHalfSpace::new(alpha, beta, delta)
}

// ---------------------------------------------------------------------------
// LQR reference controller
// ---------------------------------------------------------------------------

/// Infinite-horizon LQR point tracker: relinearizes the model at the current
/// mean each call, solves the continuous Riccati equation (warm-started from
/// the previous solution), and returns `u_ref = -K (mu - goal)`.
///
/// The controller knows nothing about constraints or obstacles; it is the
/// nominal reference the safety filter corrects.
pub struct LqrController {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    goal: DVector<f64>,
    linearization: Option<Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>>,
    wrapped_angles: Vec<usize>,
    cached_p: Option<DMatrix<f64>>,
    last_gain: Option<DMatrix<f64>>,
}

/// Wrap an angle to `[-pi, pi)`.
fn wrap_to_pi(x: f64) -> f64 {
    (x + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
}

impl LqrController {
    /// Build a tracker with state weight `q`, input weight `r`, and a full
    /// goal state.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, goal: DVector<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() || r.nrows() != r.ncols() {
            return Err(Error::Dimension("LQR weights must be square".into()));
        }
        if q.nrows() != goal.len() {
            return Err(Error::Dimension(format!(
                "goal has length {} but Q is {}x{}",
                goal.len(),
                q.nrows(),
                q.ncols()
            )));
        }
        Ok(LqrController {
            q,
            r,
            goal,
            linearization: None,
            wrapped_angles: Vec::new(),
            cached_p: None,
            last_gain: None,
        })
    }

    /// Map the mean to the linearization point used for gain design (e.g.
    /// speed regularization). Defaults to the identity.
    pub fn with_linearization(
        mut self,
        f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.linearization = Some(Box::new(f));
        self
    }

    /// Treat the given state index as an angle: its tracking error wraps to
    /// `[-pi, pi)`.
    pub fn with_wrapped_angle(mut self, index: usize) -> Self {
        self.wrapped_angles.push(index);
        self
    }

    /// Current goal state.
    pub fn goal(&self) -> &DVector<f64> {
        &self.goal
    }

    /// Retarget the controller.
    pub fn set_goal(&mut self, goal: DVector<f64>) {
        self.goal = goal;
    }

    /// Reference input at the mean estimate.
    ///
    /// # Errors
    ///
    /// Riccati non-convergence falls back to the previous gain with a logged
    /// warning; the error is returned only when no previous gain exists.
    pub fn control(&mut self, model: &SystemModel, mu: &DVector<f64>) -> Result<DVector<f64>> {
        let n = model.state_dim();
        let m = model.input_dim();
        if mu.len() != n || self.goal.len() != n || self.q.nrows() != n || self.r.nrows() != m {
            return Err(Error::Dimension(format!(
                "LQR dimensions inconsistent with a {n}-state, {m}-input model"
            )));
        }
        let x_lin = match &self.linearization {
            Some(f) => f(mu),
            None => mu.clone(),
        };
        let a = model.jacobian_f64(&x_lin, &DVector::zeros(m));
        let b = model.input_map_f64(&x_lin);
        let k = match lqr_gain(&a, &b, &self.q, &self.r, self.cached_p.as_ref()) {
            Ok((k, p)) => {
                self.cached_p = Some(p);
                self.last_gain = Some(k.clone());
                k
            }
            Err(e) => match &self.last_gain {
                Some(k) => {
                    log::warn!("LQR gain update failed ({e}); reusing previous gain");
                    k.clone()
                }
                None => return Err(e),
            },
        };
        let mut err = mu - &self.goal;
        for &i in &self.wrapped_angles {
            err[i] = wrap_to_pi(err[i]);
        }
        Ok(-(k * err))
    }
}

/// Unicycle LQR with caller-chosen weights, heading error wrapped, and the
/// linearization speed floored at [`UNICYCLE_SPEED_FLOOR`] to keep the design
/// stabilizable near standstill.
pub fn unicycle_lqr_with(
    goal: DVector<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
) -> Result<LqrController> {
    Ok(LqrController::new(q, r, goal)?
        .with_wrapped_angle(3)
        .with_linearization(|x| {
            let mut xr = x.clone();
            xr[2] = xr[2].max(UNICYCLE_SPEED_FLOOR);
            xr
        }))
}

/// Unicycle LQR with weights `Q = diag(10, 5, 5, 5)`, `R = diag(5, 10)`.
pub fn unicycle_lqr(goal: DVector<f64>) -> Result<LqrController> {
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 5.0, 5.0, 5.0]));
    let r = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 10.0]));
    unicycle_lqr_with(goal, q, r)
}

// ---------------------------------------------------------------------------
// Adversarial reference policy
// ---------------------------------------------------------------------------

/// Scripted adversary: commands maximum acceleration toward a seeded,
/// shuffled cycle of points strictly outside a box (the corners of the box
/// scaled outward about its center). Deterministic given the seed.
pub struct AdversarialPolicy {
    targets: Vec<DVector<f64>>,
    period: f64,
    u_max: f64,
}

impl AdversarialPolicy {
    /// Build the policy from the safe box `[lower, upper]`. Targets are the
    /// `2^d` corners of the box scaled about its center by `scale > 1`,
    /// visited in a seed-shuffled order for `period` seconds each.
    pub fn from_box(
        lower: &DVector<f64>,
        upper: &DVector<f64>,
        scale: f64,
        u_max: f64,
        period: f64,
        seed: u64,
    ) -> Result<Self> {
        let d = lower.len();
        if upper.len() != d || d == 0 {
            return Err(Error::Dimension(
                "box corners must be nonempty and of equal length".into(),
            ));
        }
        if d > 16 {
            return Err(Error::Config(format!(
                "corner enumeration over {d} dimensions is unreasonable"
            )));
        }
        for i in 0..d {
            if !(lower[i] < upper[i]) {
                return Err(Error::Config(format!(
                    "box side {i} inverted: [{}, {}]",
                    lower[i], upper[i]
                )));
            }
        }
        if !(scale > 1.0) {
            return Err(Error::Config(format!(
                "scale must exceed 1 so targets lie outside the box, got {scale}"
            )));
        }
        if !(u_max > 0.0) || !(period > 0.0) {
            return Err(Error::Config(
                "adversary needs positive u_max and period".into(),
            ));
        }
        let mut targets = Vec::with_capacity(1 << d);
        for mask in 0..(1usize << d) {
            let mut corner = DVector::zeros(d);
            for i in 0..d {
                let center = 0.5 * (lower[i] + upper[i]);
                let half = 0.5 * (upper[i] - lower[i]) * scale;
                corner[i] = if mask & (1 << i) != 0 {
                    center + half
                } else {
                    center - half
                };
            }
            targets.push(corner);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        targets.shuffle(&mut rng);
        Ok(AdversarialPolicy {
            targets,
            period,
            u_max,
        })
    }

    /// The point being chased at time `t`.
    pub fn target_at(&self, t: f64) -> &DVector<f64> {
        let idx = (t.max(0.0) / self.period).floor() as usize % self.targets.len();
        &self.targets[idx]
    }

    /// Reference acceleration at time `t` from mean position `mu_pos`
    /// (leading coordinates of the mean): full thrust toward the current
    /// target.
    pub fn control(&self, t: f64, mu_pos: &DVector<f64>) -> DVector<f64> {
        let target = self.target_at(t);
        let d = target.len();
        let mut dir = DVector::zeros(d);
        for i in 0..d {
            dir[i] = target[i] - mu_pos[i];
        }
        let norm = dir.norm();
        if norm <= 1e-9 {
            return DVector::zeros(d);
        }
        dir * (self.u_max / norm)
    }
}
