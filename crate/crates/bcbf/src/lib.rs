//! Risk-aware safety filtering for stochastic control-affine systems under
//! state uncertainty.
//!
//! The crate treats the *belief* — the Gaussian state estimate `(mu, Sigma)`
//! maintained by a continuous-discrete extended Kalman filter — as the system
//! state. Safety requirements are chance constraints "stay in the half-space
//! with probability at least `1 - delta`", which become deterministic
//! value-at-risk barrier functions over beliefs:
//!
//! ```text
//! h(b) = alpha' mu - beta - erfinv(1 - 2 delta) sqrt(2 alpha' Sigma alpha) - gamma
//! ```
//!
//! Between measurements the belief flows continuously and `h` can be rendered
//! forward-invariant by a control barrier function condition; at measurements
//! the belief jumps discretely, and the jump's exit risk is bounded
//! ([`filter::natural_bound`]) or suppressed to a chosen budget by the margin
//! `gamma` ([`filter::gamma_margin`]). The safety filter
//! ([`filter::filter_control`]) minimally corrects a reference input subject
//! to these constraints via a small dense QP.
//!
//! Module map:
//!
//! - [`belief`]: Gaussian beliefs, flat belief coordinates, risk half-spaces.
//! - [`dynamics`]: EKF mean/covariance flow, Kalman updates, hybrid stepping.
//! - [`filter`]: barrier Lie derivatives, jump-risk margins, the QP filter.
//! - [`qp`]: dense dual active-set QP with optional shared slack.
//! - [`models`]: unicycle and drone models, LQR and adversarial references.
//! - [`riccati`]: Lyapunov/Riccati solvers backing the LQR reference.
//! - [`special`]: `erf`/`erfc`/`erfinv` used by the risk calculus.
//! - [`dual`]: forward-mode dual numbers for exact directional derivatives.
//! - [`scenario`]: declarative JSON scenario files and their compilation.
//! - [`sim`]: closed-loop runs, Monte Carlo studies, reports, CSV output.

pub mod belief;
pub mod dual;
pub mod dynamics;
pub mod error;
pub mod filter;
pub mod models;
pub mod qp;
pub mod riccati;
pub mod scenario;
pub mod sim;
pub mod special;

pub use belief::{
    belief_len, cov_index, prob_halfspace, var_gradient, var_value, BeliefVector, GaussianBelief,
    RiskHalfSpace,
};
pub use dynamics::{
    belief_affine_parts, belief_flow, hybrid_step, hybrid_step_with, innovation_covariance,
    kalman_gain, kalman_update, Integrator, ObservationModel, SystemModel,
};
pub use error::{Error, Result};
pub use filter::{
    assemble_constraint, filter_control, gamma_margin, lie_derivatives, natural_bound,
    BarrierConstraint, ConstraintGeometry, ConstraintOrder, ConstraintTelemetry, FilterOptions,
    FilterOutput, LieDerivatives, SafetyFilter,
};
pub use models::{
    double_integrator, drone_model, drone_position_observation, drone_velocity_observation,
    obstacle_halfspace, unicycle_lqr, unicycle_model, unicycle_observation, AdversarialPolicy,
    LqrController,
};
pub use qp::{solve_qp, QPProblem, QpSolution};
pub use scenario::Scenario;
pub use sim::{
    bound_report, monte_carlo, simulate, BoundRow, ControllerKind, MetricsReport, SimRecord,
    StepRecord, TimingStats,
};
