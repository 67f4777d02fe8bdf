//! Declarative scenario files: JSON documents describing a model, initial
//! belief, sensing schedule, constraints, reference controller, and run
//! parameters. Matrices are nested arrays in row-major order. Every file
//! carries a mandatory `schema_version`.
//!
//! This module owns the serde types, their validation, and the compilation
//! of specs into runtime objects ([`SystemModel`], [`ObservationModel`],
//! [`BarrierConstraint`] groups); the execution loop lives in [`crate::sim`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{GaussianBelief, RiskHalfSpace};
use crate::dynamics::{Integrator, ObservationModel, SystemModel};
use crate::error::{Error, Result};
use crate::filter::{BarrierConstraint, ConstraintGeometry};
use crate::models;

/// The schema version this build reads and writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Default goal arrival tolerance (meters).
pub fn default_goal_tolerance() -> f64 {
    0.3
}

fn default_slack_weight() -> Option<f64> {
    Some(1e6)
}

fn default_zeta() -> [f64; 2] {
    [4.0, 4.0]
}

fn default_order() -> u8 {
    2
}

/// Convert nested row-major arrays to a matrix.
pub fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Config("matrix must have at least one row".into()));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(
            "matrix rows must be nonempty and of equal length".into(),
        ));
    }
    let mut m = DMatrix::zeros(rows.len(), ncols);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

/// Convert a flat array to a vector.
pub fn to_vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// System model selection.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Planar unicycle `(p_x, p_y, v, phi)` with inputs `(a, omega)` and the
    /// default motion noise.
    Unicycle,
    /// Linear time-invariant model `x_dot = A x + B u + w`, `w ~ N(0, Q)`.
    Linear {
        /// State matrix, row-major.
        a: Vec<Vec<f64>>,
        /// Input matrix, row-major.
        b: Vec<Vec<f64>>,
        /// Motion noise covariance, row-major.
        q: Vec<Vec<f64>>,
    },
    /// `d`-dimensional double integrator (`x = [p; v]`, `u` the
    /// acceleration) with isotropic motion noise `Q = noise_var * I`.
    DoubleIntegrator {
        /// Position dimension.
        d: usize,
        /// Per-axis motion noise variance.
        noise_var: f64,
    },
}

/// Initial Gaussian belief.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct BeliefSpec {
    /// Mean state.
    pub mean: Vec<f64>,
    /// Covariance, row-major.
    pub cov: Vec<Vec<f64>>,
}

/// How the ground-truth initial state is chosen.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthSpec {
    /// Sample from the initial belief (per-run randomization).
    #[default]
    SampleBelief,
    /// Start exactly at the belief mean.
    Mean,
    /// Start at a fixed state.
    Fixed {
        /// The initial true state.
        state: Vec<f64>,
    },
}

/// One sensor configuration: noise covariance and sampling rate.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SensorSpec {
    /// Measurement noise covariance, row-major.
    pub r: Vec<Vec<f64>>,
    /// Sampling frequency in Hz.
    pub rate_hz: f64,
}

/// Axis-aligned box over the leading (position) coordinates.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct BoxSpec {
    /// Lower corner.
    pub lower: Vec<f64>,
    /// Upper corner.
    pub upper: Vec<f64>,
}

impl BoxSpec {
    /// Membership of a state whose leading coordinates are the position.
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.lower.len() <= x.len()
            && self
                .lower
                .iter()
                .zip(self.upper.iter())
                .enumerate()
                .all(|(i, (lo, hi))| x[i] >= *lo && x[i] <= *hi)
    }

    fn validate(&self, n: usize, what: &str) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::Config(format!(
                "{what}: box corners must be nonempty and of equal length"
            )));
        }
        if self.lower.len() > n {
            return Err(Error::Config(format!(
                "{what}: box has {} coordinates but the state has {n}",
                self.lower.len()
            )));
        }
        for i in 0..self.lower.len() {
            if !(self.lower[i] < self.upper[i]) {
                return Err(Error::Config(format!(
                    "{what}: box side {i} inverted: [{}, {}]",
                    self.lower[i], self.upper[i]
                )));
            }
        }
        Ok(())
    }
}

/// A region with its own sensor configuration.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SensingRegion {
    /// Region over the leading coordinates; first matching region wins.
    #[serde(flatten)]
    pub region: BoxSpec,
    /// Sensor used inside the region.
    pub sensor: SensorSpec,
}

/// Which position keys region membership.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegionKey {
    /// Ground-truth position (the physical sensor situation).
    #[default]
    Truth,
    /// Belief mean position.
    Belief,
}

/// Observation structure plus a region-dependent schedule of noise/rate.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SensingSpec {
    /// Observation matrix `H` (`z = H x + v`), row-major.
    pub h: Vec<Vec<f64>>,
    /// Sensor used outside all regions.
    pub default: SensorSpec,
    /// Region-specific sensors; first match wins.
    #[serde(default)]
    pub regions: Vec<SensingRegion>,
    /// Whether regions key on the true or the believed position.
    #[serde(default)]
    pub region_key: RegionKey,
}

/// One barrier constraint.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintSpec {
    /// Fixed half-space `alpha' x >= beta` held with probability `1 - delta`.
    HalfSpace {
        /// Name used in telemetry and CSV columns.
        label: String,
        /// Constraint direction (state dimension).
        alpha: Vec<f64>,
        /// Offset.
        beta: f64,
        /// Risk level in `(0, 0.5]`.
        delta: f64,
        /// Relative degree (1 or 2).
        #[serde(default = "default_order")]
        order: u8,
        /// Exponential-CBF gains for order 2.
        #[serde(default = "default_zeta")]
        zeta: [f64; 2],
        /// Enforce only while the keyed position is inside this box.
        #[serde(default)]
        active_region: Option<BoxSpec>,
    },
    /// Circular/spherical obstacle, linearized at the mean each step.
    Obstacle {
        /// Name used in telemetry and CSV columns.
        label: String,
        /// Obstacle center over the leading coordinates.
        center: Vec<f64>,
        /// Obstacle radius.
        radius: f64,
        /// Risk level in `(0, 0.5]`.
        delta: f64,
        /// Relative degree (1 or 2).
        #[serde(default = "default_order")]
        order: u8,
        /// Exponential-CBF gains for order 2.
        #[serde(default = "default_zeta")]
        zeta: [f64; 2],
        /// Differentiate through the linearization direction.
        #[serde(default)]
        differentiate_alpha: bool,
        /// Enforce only while the keyed position is inside this box.
        #[serde(default)]
        active_region: Option<BoxSpec>,
    },
}

impl ConstraintSpec {
    /// The constraint's telemetry label.
    pub fn label(&self) -> &str {
        match self {
            ConstraintSpec::HalfSpace { label, .. } => label,
            ConstraintSpec::Obstacle { label, .. } => label,
        }
    }

    /// The activation region, if any.
    pub fn active_region(&self) -> Option<&BoxSpec> {
        match self {
            ConstraintSpec::HalfSpace { active_region, .. } => active_region.as_ref(),
            ConstraintSpec::Obstacle { active_region, .. } => active_region.as_ref(),
        }
    }
}

/// Reference (nominal) controller.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceSpec {
    /// LQR toward a full goal state, relinearized at the mean each step.
    /// Omitted weights fall back to per-model defaults.
    Lqr {
        /// Full goal state.
        goal: Vec<f64>,
        /// State weight, row-major.
        #[serde(default)]
        q: Option<Vec<Vec<f64>>>,
        /// Input weight, row-major.
        #[serde(default)]
        r: Option<Vec<Vec<f64>>>,
    },
    /// Waypoint sequence for double-integrator models: LQR toward
    /// `[waypoint; 0]`, advancing when the mean position comes within
    /// `switch_radius`.
    Waypoints {
        /// Positions to visit in order.
        points: Vec<Vec<f64>>,
        /// Arrival radius that advances to the next waypoint.
        switch_radius: f64,
        /// State weight, row-major.
        #[serde(default)]
        q: Option<Vec<Vec<f64>>>,
        /// Input weight, row-major.
        #[serde(default)]
        r: Option<Vec<Vec<f64>>>,
    },
    /// Scripted adversary chasing points outside a box (double-integrator
    /// models): full thrust toward seed-shuffled scaled box corners.
    Adversary {
        /// Box whose scaled corners are chased.
        lower: Vec<f64>,
        /// Upper corner of that box.
        upper: Vec<f64>,
        /// Outward scaling factor (> 1).
        scale: f64,
        /// Command magnitude.
        u_max: f64,
        /// Seconds spent per target.
        period: f64,
        /// Shuffle seed.
        seed: u64,
    },
}

/// Input box bounds.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct BoundsSpec {
    /// Per-input lower bounds.
    pub lower: Vec<f64>,
    /// Per-input upper bounds.
    pub upper: Vec<f64>,
}

/// A complete scenario description.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Scenario {
    /// Mandatory schema version; this build accepts [`SCHEMA_VERSION`].
    pub schema_version: u32,
    /// Scenario name (used in output file names).
    pub name: String,
    /// System model.
    pub model: ModelSpec,
    /// Initial belief.
    pub initial_belief: BeliefSpec,
    /// Ground-truth initialization (defaults to sampling the belief).
    #[serde(default)]
    pub initial_truth: TruthSpec,
    /// Observation structure and schedule.
    pub sensing: SensingSpec,
    /// Barrier constraints.
    pub constraints: Vec<ConstraintSpec>,
    /// Reference controller.
    pub reference: ReferenceSpec,
    /// Goal position for arrival metrics (`None`: no arrival metric).
    #[serde(default)]
    pub goal: Option<Vec<f64>>,
    /// Arrival tolerance on the mean position.
    #[serde(default = "default_goal_tolerance")]
    pub goal_tolerance: f64,
    /// Total simulated time (seconds).
    pub duration: f64,
    /// Control/integration step (seconds).
    pub dt: f64,
    /// Jump-risk budget for the margin recomputation.
    pub epsilon: f64,
    /// Input box bounds.
    #[serde(default)]
    pub input_bounds: Option<BoundsSpec>,
    /// Slack weight for infeasibility relaxation (`null`: hard constraints).
    #[serde(default = "default_slack_weight")]
    pub slack_weight: Option<f64>,
    /// Belief-flow integrator.
    #[serde(default)]
    pub integrator: Integrator,
    /// Ground-truth safe boxes; when nonempty the true state must stay in
    /// their union (in addition to obstacles and always-active half-spaces).
    #[serde(default)]
    pub truth_safe_boxes: Vec<BoxSpec>,
}

impl Scenario {
    /// Parse and validate a scenario from JSON text.
    pub fn from_json(text: &str) -> Result<Scenario> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    /// Load and validate a scenario file.
    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Scenario> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// State dimension implied by the model spec.
    pub fn state_dim(&self) -> usize {
        match &self.model {
            ModelSpec::Unicycle => 4,
            ModelSpec::Linear { a, .. } => a.len(),
            ModelSpec::DoubleIntegrator { d, .. } => 2 * d,
        }
    }

    /// Input dimension implied by the model spec.
    pub fn input_dim(&self) -> usize {
        match &self.model {
            ModelSpec::Unicycle => 2,
            ModelSpec::Linear { b, .. } => b.first().map_or(0, Vec::len),
            ModelSpec::DoubleIntegrator { d, .. } => *d,
        }
    }

    /// Full validation of dimensions, ranges, and cross-references.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.name.is_empty() {
            return Err(Error::Config("scenario name must be nonempty".into()));
        }
        let n = self.state_dim();
        let m = self.input_dim();
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.duration >= self.dt) {
            return Err(Error::Config(
                "duration must cover at least one step".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 0.5], got {}",
                self.epsilon
            )));
        }
        if !(self.goal_tolerance > 0.0) {
            return Err(Error::Config("goal_tolerance must be positive".into()));
        }
        if self.initial_belief.mean.len() != n {
            return Err(Error::Dimension(format!(
                "initial mean has length {}, expected {n}",
                self.initial_belief.mean.len()
            )));
        }
        // Belief/model construction performs the deep numeric checks.
        self.build_model()?;
        self.initial_belief()?;
        if let TruthSpec::Fixed { state } = &self.initial_truth {
            if state.len() != n {
                return Err(Error::Dimension(format!(
                    "initial_truth state has length {}, expected {n}",
                    state.len()
                )));
            }
        }

        let h = to_matrix(&self.sensing.h)?;
        if h.ncols() != n {
            return Err(Error::Dimension(format!(
                "H has {} columns, expected {n}",
                h.ncols()
            )));
        }
        self.observation_for(&self.sensing.default)?;
        for (i, region) in self.sensing.regions.iter().enumerate() {
            region.region.validate(n, &format!("sensing region {i}"))?;
            self.observation_for(&region.sensor)?;
        }

        if let Some(bounds) = &self.input_bounds {
            if bounds.lower.len() != m || bounds.upper.len() != m {
                return Err(Error::Dimension(format!(
                    "input bounds have lengths {}/{}, expected {m}",
                    bounds.lower.len(),
                    bounds.upper.len()
                )));
            }
            for i in 0..m {
                if !(bounds.lower[i] < bounds.upper[i]) {
                    return Err(Error::Config(format!("input bound {i} inverted")));
                }
            }
        }
        if let Some(w) = self.slack_weight {
            if !(w > 0.0) {
                return Err(Error::Config("slack_weight must be positive".into()));
            }
        }

        let mut labels = std::collections::HashSet::new();
        let mut any_region = false;
        let mut any_always = false;
        for (i, c) in self.constraints.iter().enumerate() {
            if !labels.insert(c.label().to_string()) {
                return Err(Error::Config(format!(
                    "duplicate constraint label '{}'",
                    c.label()
                )));
            }
            match c.active_region() {
                Some(region) => {
                    any_region = true;
                    region.validate(n, &format!("constraint {i} active_region"))?;
                }
                None => any_always = true,
            }
            match c {
                ConstraintSpec::HalfSpace {
                    alpha,
                    beta,
                    delta,
                    order,
                    zeta,
                    ..
                } => {
                    if alpha.len() != n {
                        return Err(Error::Dimension(format!(
                            "constraint {i} alpha has length {}, expected {n}",
                            alpha.len()
                        )));
                    }
                    RiskHalfSpace::new(to_vector(alpha), *beta, *delta)?;
                    check_order(*order, *zeta, i)?;
                }
                ConstraintSpec::Obstacle {
                    center,
                    radius,
                    delta,
                    order,
                    zeta,
                    ..
                } => {
                    if center.is_empty() || center.len() > n {
                        return Err(Error::Dimension(format!(
                            "constraint {i} center has length {}, state has {n}",
                            center.len()
                        )));
                    }
                    if !(*radius > 0.0) {
                        return Err(Error::Config(format!(
                            "constraint {i} radius must be positive"
                        )));
                    }
                    if !(*delta > 0.0 && *delta <= 0.5) {
                        return Err(Error::Config(format!(
                            "constraint {i} delta must lie in (0, 0.5]"
                        )));
                    }
                    check_order(*order, *zeta, i)?;
                }
            }
        }
        if any_region && any_always {
            return Err(Error::Config(
                "mixing always-active and region-scoped constraints is not supported; \
                 give every constraint an active_region (regions may overlap)"
                    .into(),
            ));
        }

        match &self.reference {
            ReferenceSpec::Lqr { goal, q, r } => {
                if goal.len() != n {
                    return Err(Error::Dimension(format!(
                        "LQR goal has length {}, expected {n}",
                        goal.len()
                    )));
                }
                check_weights(q, r, n, m)?;
            }
            ReferenceSpec::Waypoints {
                points,
                switch_radius,
                q,
                r,
            } => {
                if n != 2 * m || matches!(self.model, ModelSpec::Unicycle) {
                    return Err(Error::Config(
                        "waypoint references require a double-integrator-style linear model"
                            .into(),
                    ));
                }
                if points.is_empty() || points.iter().any(|p| p.len() != m) {
                    return Err(Error::Config(format!(
                        "waypoints must be nonempty positions of length {m}"
                    )));
                }
                if !(*switch_radius > 0.0) {
                    return Err(Error::Config("switch_radius must be positive".into()));
                }
                check_weights(q, r, n, m)?;
            }
            ReferenceSpec::Adversary {
                lower,
                upper,
                scale,
                u_max,
                period,
                seed,
            } => {
                if n != 2 * m || matches!(self.model, ModelSpec::Unicycle) {
                    return Err(Error::Config(
                        "the adversary reference requires a double-integrator-style linear model"
                            .into(),
                    ));
                }
                models::AdversarialPolicy::from_box(
                    &to_vector(lower),
                    &to_vector(upper),
                    *scale,
                    *u_max,
                    *period,
                    *seed,
                )?;
            }
        }

        if let Some(goal) = &self.goal {
            if goal.is_empty() || goal.len() > n {
                return Err(Error::Dimension(format!(
                    "goal has length {}, state has {n}",
                    goal.len()
                )));
            }
        }
        for (i, b) in self.truth_safe_boxes.iter().enumerate() {
            b.validate(n, &format!("truth_safe_box {i}"))?;
        }
        Ok(())
    }

    /// Build the system model.
    pub fn build_model(&self) -> Result<SystemModel> {
        match &self.model {
            ModelSpec::Unicycle => Ok(models::unicycle_model()),
            ModelSpec::Linear { a, b, q } => {
                SystemModel::linear(to_matrix(a)?, to_matrix(b)?, to_matrix(q)?)
            }
            ModelSpec::DoubleIntegrator { d, noise_var } => {
                models::double_integrator(*d, *noise_var)
            }
        }
    }

    /// Build the observation model for one sensor configuration.
    pub fn observation_for(&self, sensor: &SensorSpec) -> Result<ObservationModel> {
        ObservationModel::linear(
            to_matrix(&self.sensing.h)?,
            to_matrix(&sensor.r)?,
            sensor.rate_hz,
        )
    }

    /// The sensor configuration in effect at a keyed position (first
    /// matching region, else the default).
    pub fn sensor_at(&self, x: &DVector<f64>) -> &SensorSpec {
        for region in &self.sensing.regions {
            if region.region.contains(x) {
                return &region.sensor;
            }
        }
        &self.sensing.default
    }

    /// The validated initial belief.
    pub fn initial_belief(&self) -> Result<GaussianBelief> {
        GaussianBelief::new(
            to_vector(&self.initial_belief.mean),
            to_matrix(&self.initial_belief.cov)?,
        )
    }

    /// Compile one constraint spec into a runtime barrier constraint.
    ///
    /// `delta_override` substitutes the risk level (used by the mean-state
    /// baseline, which runs the same pipeline at `delta = 0.5`). Obstacle
    /// constraints are seeded with their linearization at the initial mean.
    pub fn build_constraint(
        &self,
        spec: &ConstraintSpec,
        delta_override: Option<f64>,
    ) -> Result<BarrierConstraint> {
        let n = self.state_dim();
        match spec {
            ConstraintSpec::HalfSpace {
                label,
                alpha,
                beta,
                delta,
                order,
                zeta,
                ..
            } => {
                let hs =
                    RiskHalfSpace::new(to_vector(alpha), *beta, delta_override.unwrap_or(*delta))?;
                build_ordered(label, hs, *order, *zeta)
            }
            ConstraintSpec::Obstacle {
                label,
                center,
                radius,
                delta,
                order,
                zeta,
                differentiate_alpha,
                ..
            } => {
                let b0 = self.initial_belief()?;
                let center_v = to_vector(center);
                let hs = match models::obstacle_halfspace(
                    &b0,
                    &center_v,
                    *radius,
                    delta_override.unwrap_or(*delta),
                ) {
                    Ok(hs) => hs,
                    Err(Error::Domain(_)) => {
                        // Initial mean at the center: any direction serves as
                        // the held previous linearization.
                        let mut alpha = DVector::zeros(n);
                        alpha[0] = 1.0;
                        let beta = center_v[0] + radius;
                        RiskHalfSpace::new(alpha, beta, delta_override.unwrap_or(*delta))?
                    }
                    Err(e) => return Err(e),
                };
                Ok(build_ordered(label, hs, *order, *zeta)?.with_geometry(
                    ConstraintGeometry::Obstacle {
                        center: center_v,
                        radius: *radius,
                        differentiate_alpha: *differentiate_alpha,
                    },
                ))
            }
        }
    }

    /// Number of control steps (`duration/dt`, rounded to the nearest
    /// integer).
    pub fn step_count(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

fn check_order(order: u8, zeta: [f64; 2], i: usize) -> Result<()> {
    match order {
        1 => Ok(()),
        2 => {
            if zeta[0] > 0.0 && zeta[1] > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "constraint {i}: order-2 gains must both be positive"
                )))
            }
        }
        _ => Err(Error::Config(format!(
            "constraint {i}: order must be 1 or 2, got {order}"
        ))),
    }
}

fn check_weights(
    q: &Option<Vec<Vec<f64>>>,
    r: &Option<Vec<Vec<f64>>>,
    n: usize,
    m: usize,
) -> Result<()> {
    if let Some(q) = q {
        let qm = to_matrix(q)?;
        if qm.nrows() != n || qm.ncols() != n {
            return Err(Error::Dimension(format!(
                "reference Q is {}x{}, expected {n}x{n}",
                qm.nrows(),
                qm.ncols()
            )));
        }
    }
    if let Some(r) = r {
        let rm = to_matrix(r)?;
        if rm.nrows() != m || rm.ncols() != m {
            return Err(Error::Dimension(format!(
                "reference R is {}x{}, expected {m}x{m}",
                rm.nrows(),
                rm.ncols()
            )));
        }
    }
    Ok(())
}

fn build_ordered(
    label: &str,
    hs: RiskHalfSpace,
    order: u8,
    zeta: [f64; 2],
) -> Result<BarrierConstraint> {
    match order {
        1 => Ok(BarrierConstraint::first_order(label, hs)),
        2 => BarrierConstraint::second_order(label, hs, zeta),
        _ => Err(Error::Config(format!("order must be 1 or 2, got {order}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_scenario_json() -> String {
        r#"{
            "schema_version": 1,
            "name": "scalar",
            "model": {"kind": "linear", "a": [[0.0]], "b": [[1.0]], "q": [[0.0]]},
            "initial_belief": {"mean": [2.0], "cov": [[0.3]]},
            "sensing": {"h": [[1.0]], "default": {"r": [[0.1]], "rate_hz": 10.0}},
            "constraints": [
                {"kind": "half_space", "label": "wall", "alpha": [1.0], "beta": 0.0,
                 "delta": 0.01, "order": 1}
            ],
            "reference": {"kind": "lqr", "goal": [2.0], "q": [[1.0]], "r": [[1.0]]},
            "duration": 1.0,
            "dt": 0.001,
            "epsilon": 0.01
        }"#
        .to_string()
    }

    #[test]
    fn scalar_scenario_roundtrip() {
        let s = Scenario::from_json(&scalar_scenario_json()).unwrap();
        assert_eq!(s.state_dim(), 1);
        assert_eq!(s.input_dim(), 1);
        assert_eq!(s.step_count(), 1000);
        assert_eq!(s.slack_weight, Some(1e6));
        assert_eq!(s.goal_tolerance, 0.3);
        assert_eq!(s.integrator, Integrator::Rk4);
        // Serialize/deserialize stability.
        let text = serde_json::to_string(&s).unwrap();
        let s2 = Scenario::from_json(&text).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn schema_version_is_enforced() {
        let bad = scalar_scenario_json().replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(Scenario::from_json(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn dimension_errors_are_caught() {
        let bad = scalar_scenario_json().replace("\"alpha\": [1.0]", "\"alpha\": [1.0, 0.0]");
        assert!(Scenario::from_json(&bad).is_err());
        let bad = scalar_scenario_json().replace("\"goal\": [2.0]", "\"goal\": [2.0, 0.0]");
        assert!(Scenario::from_json(&bad).is_err());
        let bad = scalar_scenario_json().replace("\"epsilon\": 0.01", "\"epsilon\": 0.7");
        assert!(Scenario::from_json(&bad).is_err());
        let bad = scalar_scenario_json().replace("\"delta\": 0.01", "\"delta\": 0.0");
        assert!(Scenario::from_json(&bad).is_err());
    }

    #[test]
    fn unicycle_scenario_compiles() {
        let text = r#"{
            "schema_version": 1,
            "name": "uni",
            "model": {"kind": "unicycle"},
            "initial_belief": {
                "mean": [0.0, 1.5, 0.0, 0.0],
                "cov": [[0.1,0,0,0],[0,0.1,0,0],[0,0,0.01,0],[0,0,0,0.01]]
            },
            "sensing": {
                "h": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]],
                "default": {"r": [[0.04,0,0,0],[0,0.04,0,0],[0,0,0.01,0],[0,0,0,0.01]],
                            "rate_hz": 10.0}
            },
            "constraints": [
                {"kind": "obstacle", "label": "disk", "center": [5.0, 0.0], "radius": 1.0,
                 "delta": 0.01, "zeta": [4.0, 4.0]}
            ],
            "reference": {"kind": "lqr", "goal": [10.0, -1.5, 0.0, -0.29]},
            "goal": [10.0, -1.5],
            "duration": 10.0,
            "dt": 0.001,
            "epsilon": 0.01,
            "input_bounds": {"lower": [-5.0, -4.0], "upper": [5.0, 4.0]}
        }"#;
        let s = Scenario::from_json(text).unwrap();
        let model = s.build_model().unwrap();
        assert_eq!(model.state_dim(), 4);
        let c = s.build_constraint(&s.constraints[0], None).unwrap();
        // Linearization at the initial mean points away from the obstacle.
        let d = (to_vector(&[0.0, 1.5]) - to_vector(&[5.0, 0.0])).norm();
        let h0 = crate::belief::var_value(
            &GaussianBelief::new(to_vector(&[0.0, 1.5, 0.0, 0.0]), DMatrix::zeros(4, 4)).unwrap(),
            c.hs(),
        )
        .unwrap();
        approx::assert_abs_diff_eq!(h0, d - 1.0, epsilon = 1e-12);
        // The mean-state override flattens the risk tightening.
        let c_mean = s.build_constraint(&s.constraints[0], Some(0.5)).unwrap();
        assert_eq!(c_mean.hs().tightening(), 0.0);
    }

    #[test]
    fn sensing_regions_select_first_match() {
        let text = r#"{
            "schema_version": 1,
            "name": "regions",
            "model": {"kind": "linear",
                      "a": [[0,1],[0,0]], "b": [[0],[1]], "q": [[0.0,0],[0,0.0]]},
            "initial_belief": {"mean": [0.0, 0.0], "cov": [[0.1,0],[0,0.1]]},
            "sensing": {
                "h": [[1.0, 0.0]],
                "default": {"r": [[0.04]], "rate_hz": 10.0},
                "regions": [
                    {"lower": [0.0], "upper": [2.0], "sensor": {"r": [[0.01]], "rate_hz": 5.0}},
                    {"lower": [1.0], "upper": [3.0], "sensor": {"r": [[0.09]], "rate_hz": 2.0}}
                ]
            },
            "constraints": [],
            "reference": {"kind": "lqr", "goal": [1.0, 0.0]},
            "duration": 1.0,
            "dt": 0.01,
            "epsilon": 0.5
        }"#;
        let s = Scenario::from_json(text).unwrap();
        assert_eq!(s.sensor_at(&to_vector(&[1.5, 9.0])).rate_hz, 5.0); // first match
        assert_eq!(s.sensor_at(&to_vector(&[2.5, 9.0])).rate_hz, 2.0);
        assert_eq!(s.sensor_at(&to_vector(&[-1.0, 9.0])).rate_hz, 10.0); // default
    }

    #[test]
    fn mixed_activation_is_rejected() {
        let text = r#"{
            "schema_version": 1,
            "name": "mixed",
            "model": {"kind": "linear", "a": [[0.0]], "b": [[1.0]], "q": [[0.0]]},
            "initial_belief": {"mean": [2.0], "cov": [[0.3]]},
            "sensing": {"h": [[1.0]], "default": {"r": [[0.1]], "rate_hz": 10.0}},
            "constraints": [
                {"kind": "half_space", "label": "a", "alpha": [1.0], "beta": 0.0,
                 "delta": 0.1, "order": 1},
                {"kind": "half_space", "label": "b", "alpha": [-1.0], "beta": -9.0,
                 "delta": 0.1, "order": 1,
                 "active_region": {"lower": [0.0], "upper": [5.0]}}
            ],
            "reference": {"kind": "lqr", "goal": [2.0]},
            "duration": 1.0,
            "dt": 0.001,
            "epsilon": 0.01
        }"#;
        assert!(matches!(Scenario::from_json(text), Err(Error::Config(_))));
    }
}
