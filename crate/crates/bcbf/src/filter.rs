//! Risk-aware safety filtering over beliefs: barrier constraint assembly
//! (first and second order), measurement-jump risk bounds, and the
//! minimally-invasive QP filter.
//!
//! The barrier is the value-at-risk half-space margin
//! `h(b) = alpha' mu - beta - c_delta sqrt(2 alpha' Sigma alpha) - gamma` from
//! [`crate::belief`]. Along the control-affine belief flow its derivative
//! splits as `h_dot = Lf_h + Lg_h u`; when `Lg_h` vanishes identically
//! (relative degree two, e.g. position constraints with acceleration inputs)
//! the filter uses the exponential-CBF form with
//! `h_ddot = Lf2_h + LgLf_h u` and a Hurwitz gain pair `zeta`.
//!
//! First derivatives come from the closed-form barrier gradient; second
//! derivatives are directional derivatives of `phi(b) = grad h(b) . f_b(b)`
//! along `f_b` and the columns of `g_b`, evaluated exactly with dual numbers
//! (no finite differencing in the control path).
//!
//! Measurements make the belief jump, which can discretely eject the belief
//! from `h >= 0`. [`natural_bound`] bounds that one-jump exit probability for
//! a boundary belief; [`gamma_margin`] returns the extra margin `gamma` that
//! caps the exit probability at a chosen `epsilon`. The margin is recomputed
//! every control step (running maximum between measurements, reset at each
//! measurement) by [`filter_control`] / [`SafetyFilter`].

use nalgebra::{DMatrix, DVector};

use crate::belief::{symmetrize, GaussianBelief, RiskHalfSpace, SINGULAR_VARIANCE};
use crate::dual::{lift_matrix, lift_vector, value_matrix, value_vector, Dual};
use crate::dynamics::{kalman_gain, ObservationModel, SystemModel};
use crate::error::{Error, Result};
use crate::qp::{solve_qp, QPProblem};
use crate::special::{erfc, erfinv};

/// Rows whose coefficient vector has max-abs below this are treated as
/// having no input authority.
pub const VANISHING_ROW_TOL: f64 = 1e-10;

/// Mean-to-center distances below this leave the obstacle linearization
/// direction unchanged (it is undefined at the center).
pub const DEGENERATE_CENTER_TOL: f64 = 1e-9;

/// Directional jump variances at or below this are treated as "no jump risk".
pub const NEGLIGIBLE_JUMP_VARIANCE: f64 = 1e-15;

/// Relative degree of a barrier constraint with respect to the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintOrder {
    /// `h_dot` depends on `u` directly.
    First,
    /// `h_dot` is input-free; the filter constrains `h_ddot`.
    Second,
}

/// How the half-space direction relates to the underlying geometry.
#[derive(Clone, Debug)]
pub enum ConstraintGeometry {
    /// A fixed half-space (`alpha`, `beta` never change).
    Fixed,
    /// Linearization of a circular/spherical obstacle of the given radius:
    /// `alpha = (mu_pos - center)/||mu_pos - center||` refreshed each control
    /// step. With `differentiate_alpha` the mean-dependence of `alpha` enters
    /// the barrier gradient; otherwise `alpha` is frozen per step (default).
    Obstacle {
        /// Obstacle center in the leading (position) coordinates.
        center: DVector<f64>,
        /// Obstacle radius.
        radius: f64,
        /// Differentiate through the direction's mean-dependence.
        differentiate_alpha: bool,
    },
}

/// One barrier constraint handled by the safety filter.
#[derive(Clone, Debug)]
pub struct BarrierConstraint {
    /// Human-readable name used in telemetry and output columns.
    pub label: String,
    hs: RiskHalfSpace,
    order: ConstraintOrder,
    zeta: [f64; 2],
    geometry: ConstraintGeometry,
}

impl BarrierConstraint {
    /// A relative-degree-one constraint (`h_dot + h >= 0` filtering).
    pub fn first_order(label: impl Into<String>, hs: RiskHalfSpace) -> Self {
        BarrierConstraint {
            label: label.into(),
            hs,
            order: ConstraintOrder::First,
            zeta: [0.0, 0.0],
            geometry: ConstraintGeometry::Fixed,
        }
    }

    /// A relative-degree-two constraint with exponential-CBF gains:
    /// `h_ddot + zeta[1] h_dot + zeta[0] h >= 0`. Requires
    /// `s^2 + zeta[1] s + zeta[0]` Hurwitz, i.e. both entries positive.
    pub fn second_order(
        label: impl Into<String>,
        hs: RiskHalfSpace,
        zeta: [f64; 2],
    ) -> Result<Self> {
        if !(zeta[0] > 0.0 && zeta[1] > 0.0) {
            return Err(Error::Config(format!(
                "second-order gains must make s^2 + {} s + {} Hurwitz; both must be positive",
                zeta[1], zeta[0]
            )));
        }
        Ok(BarrierConstraint {
            label: label.into(),
            hs,
            order: ConstraintOrder::Second,
            zeta,
            geometry: ConstraintGeometry::Fixed,
        })
    }

    /// Attach geometry (builder style).
    pub fn with_geometry(mut self, geometry: ConstraintGeometry) -> Self {
        self.geometry = geometry;
        self
    }

    /// The underlying risk half-space.
    #[inline]
    pub fn hs(&self) -> &RiskHalfSpace {
        &self.hs
    }

    /// Mutable access (margin updates, linearization refresh).
    #[inline]
    pub fn hs_mut(&mut self) -> &mut RiskHalfSpace {
        &mut self.hs
    }

    /// Relative degree.
    #[inline]
    pub fn order(&self) -> ConstraintOrder {
        self.order
    }

    /// Exponential-CBF gains (meaningful for order two).
    #[inline]
    pub fn zeta(&self) -> [f64; 2] {
        self.zeta
    }

    /// Geometry attached to this constraint.
    #[inline]
    pub fn geometry(&self) -> &ConstraintGeometry {
        &self.geometry
    }

    /// For obstacle geometry: re-anchor the half-space at the current mean,
    /// `alpha = (mu_pos - center)/||.||`, `beta = alpha' center + radius`.
    /// Within [`DEGENERATE_CENTER_TOL`] of the center the previous direction
    /// is held (the constraint always carries a valid one by construction).
    pub fn refresh_linearization(&mut self, mu: &DVector<f64>) -> Result<()> {
        if let ConstraintGeometry::Obstacle { center, radius, .. } = &self.geometry {
            let p = center.len();
            if mu.len() < p {
                return Err(Error::Dimension(format!(
                    "mean has length {} but obstacle center has length {p}",
                    mu.len()
                )));
            }
            let mut dist2 = 0.0;
            for i in 0..p {
                let d = mu[i] - center[i];
                dist2 += d * d;
            }
            let dist = dist2.sqrt();
            if dist <= DEGENERATE_CENTER_TOL {
                return Ok(()); // hold previous direction
            }
            let n = self.hs.alpha().len();
            let mut alpha = DVector::zeros(n);
            for i in 0..p {
                alpha[i] = (mu[i] - center[i]) / dist;
            }
            let beta = (0..p).map(|i| alpha[i] * center[i]).sum::<f64>() + radius;
            self.hs.set_geometry(alpha, beta)?;
        }
        Ok(())
    }
}

/// Barrier value and Lie derivatives at a belief.
#[derive(Clone, Debug)]
pub struct LieDerivatives {
    /// Margin-adjusted barrier value `h_tilde` (includes `-gamma`).
    pub h: f64,
    /// Drift derivative `Lf_h`.
    pub lf_h: f64,
    /// Input derivative row `Lg_h` (length `m`).
    pub lg_h: DVector<f64>,
    /// Second drift derivative (order-two constraints only).
    pub lf2_h: Option<f64>,
    /// Mixed derivative row `LgLf_h` (order-two constraints only).
    pub lglf_h: Option<DVector<f64>>,
}

/// Barrier value and gradient at a dual-valued belief point.
///
/// Returns `(h, dh/dmu, dh/dSigma)` with the covariance gradient as a full
/// symmetric matrix (Frobenius-pairing convention). All three are dual-valued
/// so a directional derivative of any downstream expression can be read off
/// the derivative parts.
fn barrier_gradient_dual(
    mu: &DVector<Dual>,
    sigma: &DMatrix<Dual>,
    c: &BarrierConstraint,
) -> Result<(Dual, DVector<Dual>, DMatrix<Dual>)> {
    let n = mu.len();
    let hs = &c.hs;
    let tight = hs.tightening();
    let gamma = hs.gamma();

    let differentiated = matches!(
        c.geometry,
        ConstraintGeometry::Obstacle {
            differentiate_alpha: true,
            ..
        }
    );

    // Direction alpha and the linear margin alpha' mu - beta. In the
    // differentiated-obstacle mode both are functions of the (dual) mean and
    // the margin simplifies to ||mu_pos - center|| - radius.
    let (alpha, lin, pos_dim) = if differentiated {
        let ConstraintGeometry::Obstacle { center, radius, .. } = &c.geometry else {
            unreachable!("differentiated implies obstacle geometry");
        };
        let p = center.len();
        let mut d = DVector::from_element(p, Dual::constant(0.0));
        for i in 0..p {
            d[i] = mu[i] - center[i];
        }
        let rho2: Dual = d.iter().map(|x| *x * *x).sum();
        let rho = rho2.sqrt();
        if rho.re <= DEGENERATE_CENTER_TOL {
            return Err(Error::Domain(
                "mean is at the obstacle center; direction undefined".into(),
            ));
        }
        let mut alpha = DVector::from_element(n, Dual::constant(0.0));
        for i in 0..p {
            alpha[i] = d[i] / rho;
        }
        (alpha, rho - *radius, p)
    } else {
        if hs.alpha().len() != n {
            return Err(Error::Dimension(format!(
                "alpha has length {} but state dimension is {n}",
                hs.alpha().len()
            )));
        }
        let alpha = lift_vector(hs.alpha());
        let lin = alpha.dot(mu) - hs.beta();
        (alpha, lin, n)
    };

    if tight == 0.0 {
        // Mean half-space: no covariance dependence at all.
        let grad_sigma = DMatrix::from_element(n, n, Dual::constant(0.0));
        return Ok((lin - gamma, alpha, grad_sigma));
    }

    let sigma_alpha = sigma * &alpha;
    let s = alpha.dot(&sigma_alpha);
    if s.re <= SINGULAR_VARIANCE {
        return Err(Error::SingularGradient {
            variance: s.re,
            threshold: SINGULAR_VARIANCE,
        });
    }
    let root = (2.0 * s).sqrt();
    let h = lin - tight * root - gamma;

    // dh/dSigma = -(tight / root) alpha alpha' (Frobenius convention).
    let coeff = Dual::constant(-tight) / root;
    let grad_sigma = DMatrix::from_fn(n, n, |i, j| coeff * alpha[i] * alpha[j]);

    // dh/dmu: alpha, plus (differentiated mode) the variance's sensitivity to
    // the direction: ds/dmu = 2 J' Sigma alpha with J = (I - aa')/rho on the
    // position block.
    let grad_mu = if differentiated {
        let ConstraintGeometry::Obstacle { center, .. } = &c.geometry else {
            unreachable!();
        };
        let p = center.len();
        let mut d = DVector::from_element(p, Dual::constant(0.0));
        for i in 0..p {
            d[i] = mu[i] - center[i];
        }
        let rho = d.iter().map(|x| *x * *x).sum::<Dual>().sqrt();
        let mut g = DVector::from_element(n, Dual::constant(0.0));
        for i in 0..n {
            g[i] = alpha[i];
        }
        for i in 0..p {
            // (J' Sigma alpha)_i with J symmetric = (I - aa')/rho.
            let mut jsa = Dual::constant(0.0);
            for k in 0..p {
                let jik = if i == k {
                    (Dual::constant(1.0) - alpha[i] * alpha[k]) / rho
                } else {
                    -alpha[i] * alpha[k] / rho
                };
                jsa += jik * sigma_alpha[k];
            }
            g[i] += coeff * 2.0 * jsa;
        }
        g
    } else {
        alpha
    };
    let _ = pos_dim;
    Ok((h, grad_mu, grad_sigma))
}

/// Structured control-affine pieces of the belief flow at `b`:
/// `(f_mu, F_Sigma, g_columns, G_Sigma_columns)`.
#[allow(clippy::type_complexity)]
fn structured_affine_parts(
    b: &GaussianBelief,
    model: &SystemModel,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>, Vec<DMatrix<f64>>) {
    let m = model.input_dim();
    let mu = b.mean();
    let zero_u = DVector::zeros(m);
    let f_mu = model.drift_f64(mu);
    let a0 = model.jacobian_f64(mu, &zero_u);
    let f_sigma = &a0 * b.cov() + b.cov() * a0.transpose() + model.q();
    let g_mat = model.input_map_f64(mu);
    let mut g_sigmas = Vec::with_capacity(m);
    for j in 0..m {
        let mut ej = DVector::zeros(m);
        ej[j] = 1.0;
        let gj = model.jacobian_f64(mu, &ej) - &a0;
        g_sigmas.push(&gj * b.cov() + b.cov() * gj.transpose());
    }
    (f_mu, f_sigma, g_mat, g_sigmas)
}

/// Directional derivative of `phi(b) = grad h(b) . f_b(b)` along the belief
/// direction `(dmu, dsigma)`, by one dual-valued sweep.
fn phi_directional(
    b: &GaussianBelief,
    model: &SystemModel,
    c: &BarrierConstraint,
    dmu: &DVector<f64>,
    dsigma: &DMatrix<f64>,
    q_dual: &DMatrix<Dual>,
) -> Result<f64> {
    let n = b.dim();
    let m = model.input_dim();
    let mu = DVector::from_fn(n, |i, _| Dual::new(b.mean()[i], dmu[i]));
    let sigma = DMatrix::from_fn(n, n, |i, j| Dual::new(b.cov()[(i, j)], dsigma[(i, j)]));
    let (_h, grad_mu, grad_sigma) = barrier_gradient_dual(&mu, &sigma, c)?;
    let f_mu = model.drift_dual(&mu);
    let zero_u = DVector::from_element(m, Dual::constant(0.0));
    let a0 = model.jacobian_dual(&mu, &zero_u);
    let f_sigma = &a0 * &sigma + &sigma * a0.transpose() + q_dual;
    let phi = grad_mu.dot(&f_mu) + grad_sigma.dot(&f_sigma);
    Ok(phi.du)
}

/// Barrier value and Lie derivatives along the belief flow.
///
/// First-order terms pair the closed-form gradient with the control-affine
/// flow pieces; order-two constraints additionally get the directional
/// derivatives of `phi = grad h . f_b` along `f_b` and each input column.
pub fn lie_derivatives(
    b: &GaussianBelief,
    model: &SystemModel,
    c: &BarrierConstraint,
) -> Result<LieDerivatives> {
    let n = model.state_dim();
    if b.dim() != n {
        return Err(Error::Dimension(format!(
            "belief dimension {} does not match model state dimension {n}",
            b.dim()
        )));
    }
    let m = model.input_dim();

    let mu0 = lift_vector(b.mean());
    let sigma0 = lift_matrix(b.cov());
    let (h_d, gmu_d, gsig_d) = barrier_gradient_dual(&mu0, &sigma0, c)?;
    let h = h_d.re;
    let grad_mu = value_vector(&gmu_d);
    let grad_sigma = value_matrix(&gsig_d);

    let (f_mu, f_sigma, g_mat, g_sigmas) = structured_affine_parts(b, model);
    let lf_h = grad_mu.dot(&f_mu) + grad_sigma.dot(&f_sigma);
    let mut lg_h = DVector::zeros(m);
    for j in 0..m {
        let gj = g_mat.column(j);
        lg_h[j] = grad_mu.dot(&gj) + grad_sigma.dot(&g_sigmas[j]);
    }

    if c.order == ConstraintOrder::First {
        return Ok(LieDerivatives {
            h,
            lf_h,
            lg_h,
            lf2_h: None,
            lglf_h: None,
        });
    }

    let q_dual = lift_matrix(model.q());
    let lf2_h = phi_directional(b, model, c, &f_mu, &f_sigma, &q_dual)?;
    let mut lglf_h = DVector::zeros(m);
    for j in 0..m {
        let dir_mu = g_mat.column(j).into_owned();
        lglf_h[j] = phi_directional(b, model, c, &dir_mu, &g_sigmas[j], &q_dual)?;
    }
    Ok(LieDerivatives {
        h,
        lf_h,
        lg_h,
        lf2_h: Some(lf2_h),
        lglf_h: Some(lglf_h),
    })
}

/// Jump statistics along a half-space direction at the prior belief:
/// `(xi, alpha' Lambda alpha)` where `xi` is the deterministic tightening
/// release of the update and `Lambda = K S K'` the jump covariance.
fn jump_stats(
    b: &GaussianBelief,
    obs: &ObservationModel,
    hs: &RiskHalfSpace,
) -> Result<(f64, f64)> {
    let n = b.dim();
    let alpha = hs.alpha();
    if alpha.len() != n {
        return Err(Error::Dimension(format!(
            "alpha has length {} but belief dimension is {n}",
            alpha.len()
        )));
    }
    let (k, s) = kalman_gain(b, obs)?;
    let h_mat = obs.jacobian_at(b.mean());
    let s_minus = alpha.dot(&(b.cov() * alpha)).max(0.0);
    let sigma_plus = symmetrize(&((DMatrix::identity(n, n) - &k * h_mat) * b.cov()));
    let s_plus = alpha.dot(&(&sigma_plus * alpha)).max(0.0);
    let lambda = symmetrize(&(&k * &s * k.transpose()));
    let lam_dir = alpha.dot(&(&lambda * alpha)).max(0.0);
    let xi = hs.tightening() * ((2.0 * s_minus).sqrt() - (2.0 * s_plus).sqrt());
    Ok((xi, lam_dir))
}

/// Probability bound on leaving `h >= 0` at a single measurement jump from a
/// boundary belief: `(1/2) erfc(xi / sqrt(2 alpha' Lambda alpha))`.
///
/// The update contracts covariance, which *releases* tightening (`xi >= 0`),
/// so the bound is at most one half. Returns exactly 0 when the jump has no
/// variance along the constraint direction.
pub fn natural_bound(
    b: &GaussianBelief,
    obs: &ObservationModel,
    hs: &RiskHalfSpace,
) -> Result<f64> {
    let (xi, lam_dir) = jump_stats(b, obs, hs)?;
    if lam_dir <= NEGLIGIBLE_JUMP_VARIANCE {
        return Ok(0.0);
    }
    Ok(0.5 * erfc(xi / (2.0 * lam_dir).sqrt()))
}

/// Margin `gamma >= 0` that caps the one-jump exit probability at `epsilon`:
/// `max(0, sqrt(2 alpha' Lambda alpha) erfinv(1 - 2 epsilon) - xi)`.
///
/// # Errors
///
/// `Config` unless `0 < epsilon <= 0.5`.
pub fn gamma_margin(
    b: &GaussianBelief,
    obs: &ObservationModel,
    hs: &RiskHalfSpace,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 0.5) {
        return Err(Error::Config(format!(
            "jump risk epsilon must lie in (0, 0.5], got {epsilon}"
        )));
    }
    let (xi, lam_dir) = jump_stats(b, obs, hs)?;
    if lam_dir <= NEGLIGIBLE_JUMP_VARIANCE {
        return Ok(0.0);
    }
    let quantile = erfinv(1.0 - 2.0 * epsilon)
        .map_err(|_| Error::Config(format!("epsilon = {epsilon} too close to zero")))?;
    Ok(((2.0 * lam_dir).sqrt() * quantile - xi).max(0.0))
}

/// Build the QP row for a constraint from its Lie derivatives:
/// order one `Lg_h . u >= -h - Lf_h`, order two
/// `LgLf_h . u >= -Lf2_h - zeta0 h - zeta1 Lf_h`.
fn row_from_derivatives(c: &BarrierConstraint, ld: &LieDerivatives) -> Result<(DVector<f64>, f64)> {
    let (a, rhs) = match c.order {
        ConstraintOrder::First => (ld.lg_h.clone(), -ld.h - ld.lf_h),
        ConstraintOrder::Second => {
            let lf2 = ld.lf2_h.expect("order-two derivatives present");
            let lglf = ld.lglf_h.clone().expect("order-two derivatives present");
            (lglf, -lf2 - c.zeta[0] * ld.h - c.zeta[1] * ld.lf_h)
        }
    };
    if a.amax() < VANISHING_ROW_TOL && rhs > VANISHING_ROW_TOL {
        return Err(Error::RelativeDegree { rhs });
    }
    Ok((a, rhs))
}

/// Assemble the QP row `a' u >= rhs` enforcing a barrier constraint at `b`.
///
/// The margin `gamma` enters through the half-space as stored; the filter
/// session keeps it at the running maximum of [`gamma_margin`] since the last
/// measurement.
///
/// # Errors
///
/// `RelativeDegree` when the row has (numerically) no input authority while
/// its right-hand side still demands progress.
pub fn assemble_constraint(
    b: &GaussianBelief,
    model: &SystemModel,
    c: &BarrierConstraint,
) -> Result<(DVector<f64>, f64)> {
    let ld = lie_derivatives(b, model, c)?;
    row_from_derivatives(c, &ld)
}

/// Options for [`filter_control`].
#[derive(Clone, Debug)]
pub struct FilterOptions {
    /// Jump-risk budget for the margin recomputation.
    pub epsilon: f64,
    /// Recompute `gamma` (running maximum) each call. Disabled for mean-state
    /// baselines, which run the same pipeline with zero margins.
    pub risk_margins: bool,
    /// Optional input box.
    pub bounds: Option<(DVector<f64>, DVector<f64>)>,
    /// Optional slack weight for infeasibility relaxation.
    pub slack_weight: Option<f64>,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            epsilon: 0.01,
            risk_margins: true,
            bounds: None,
            slack_weight: Some(1e6),
        }
    }
}

/// Per-constraint telemetry from one filter call.
#[derive(Clone, Debug)]
pub struct ConstraintTelemetry {
    /// Constraint label.
    pub label: String,
    /// Margin-adjusted barrier value `h_tilde = h_b - gamma`.
    pub h_tilde: f64,
    /// Raw barrier value `h_b`.
    pub h_b: f64,
    /// Margin in force during this call.
    pub gamma: f64,
    /// One-jump exit probability bound at this belief.
    pub natural_bound: f64,
}

/// Result of one safety-filter solve.
#[derive(Clone, Debug)]
pub struct FilterOutput {
    /// Filtered input.
    pub u: DVector<f64>,
    /// Per-constraint telemetry (same order as the constraint slice).
    pub telemetry: Vec<ConstraintTelemetry>,
    /// Shared slack value (0 when unused).
    pub slack: f64,
    /// Whether the strict QP was infeasible and slack was engaged.
    pub slack_used: bool,
    /// Indices of constraints whose rows are active at the solution.
    pub active: Vec<usize>,
    /// KKT residual of the QP solve (0 when no QP was needed).
    pub kkt_residual: f64,
}

/// One safety-filter step: update margins, assemble one QP row per
/// constraint, solve, and report telemetry.
///
/// With `risk_margins` set, each constraint's `gamma` is raised to the
/// running maximum of [`gamma_margin`] at the current belief (reset
/// externally at measurements via [`SafetyFilter::on_measurement`]). Rows
/// with no input authority and a nonpositive right-hand side are trivially
/// satisfied and skipped; slack activation is logged as a safety event.
pub fn filter_control(
    b: &GaussianBelief,
    model: &SystemModel,
    obs: &ObservationModel,
    constraints: &mut [BarrierConstraint],
    u_ref: &DVector<f64>,
    opts: &FilterOptions,
) -> Result<FilterOutput> {
    if u_ref.len() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "reference input has length {}, expected {}",
            u_ref.len(),
            model.input_dim()
        )));
    }
    let mut rows = Vec::with_capacity(constraints.len());
    let mut row_owner = Vec::with_capacity(constraints.len());
    let mut telemetry = Vec::with_capacity(constraints.len());
    for (i, c) in constraints.iter_mut().enumerate() {
        if opts.risk_margins {
            let gamma_now = gamma_margin(b, obs, &c.hs, opts.epsilon)?;
            if gamma_now > c.hs.gamma() {
                c.hs.set_gamma(gamma_now)?;
            }
        }
        let bound = natural_bound(b, obs, &c.hs)?;
        let ld = lie_derivatives(b, model, c)?;
        telemetry.push(ConstraintTelemetry {
            label: c.label.clone(),
            h_tilde: ld.h,
            h_b: ld.h + c.hs.gamma(),
            gamma: c.hs.gamma(),
            natural_bound: bound,
        });
        let (a, rhs) = row_from_derivatives(c, &ld)?;
        if a.amax() >= VANISHING_ROW_TOL {
            rows.push((a, rhs));
            row_owner.push(i);
        }
    }

    if rows.is_empty() && opts.bounds.is_none() {
        return Ok(FilterOutput {
            u: u_ref.clone(),
            telemetry,
            slack: 0.0,
            slack_used: false,
            active: Vec::new(),
            kkt_residual: 0.0,
        });
    }

    let qp = QPProblem {
        u_ref: u_ref.clone(),
        rows,
        bounds: opts.bounds.clone(),
        slack_weight: opts.slack_weight,
    };
    let sol = solve_qp(&qp)?;
    if sol.slack_used {
        log::warn!(
            "safety filter slack engaged: strict constraints infeasible, slack = {:.3e}",
            sol.slack
        );
    }
    Ok(FilterOutput {
        u: sol.u,
        telemetry,
        slack: sol.slack,
        slack_used: sol.slack_used,
        active: sol.active.into_iter().map(|r| row_owner[r]).collect(),
        kkt_residual: sol.kkt_residual,
    })
}

/// Stateful safety-filter session: owns the constraints, refreshes obstacle
/// linearizations each step, maintains running margin maxima, and resets them
/// at measurements.
pub struct SafetyFilter {
    constraints: Vec<BarrierConstraint>,
    opts: FilterOptions,
}

impl SafetyFilter {
    /// Build a session from constraints and options.
    pub fn new(constraints: Vec<BarrierConstraint>, opts: FilterOptions) -> Self {
        SafetyFilter { constraints, opts }
    }

    /// Filter one reference input at the current belief.
    pub fn step(
        &mut self,
        b: &GaussianBelief,
        model: &SystemModel,
        obs: &ObservationModel,
        u_ref: &DVector<f64>,
    ) -> Result<FilterOutput> {
        for c in &mut self.constraints {
            c.refresh_linearization(b.mean())?;
        }
        filter_control(b, model, obs, &mut self.constraints, u_ref, &self.opts)
    }

    /// Notify the session that a measurement was just incorporated: margin
    /// running maxima restart (a new inter-measurement interval begins).
    pub fn on_measurement(&mut self) {
        for c in &mut self.constraints {
            c.hs
                .set_gamma(0.0)
                .expect("zero is always a valid margin");
        }
    }

    /// The constraints as currently configured.
    pub fn constraints(&self) -> &[BarrierConstraint] {
        &self.constraints
    }

    /// The options in force.
    pub fn options(&self) -> &FilterOptions {
        &self.opts
    }
}
