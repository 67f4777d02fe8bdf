//! Benchmark harness crate for the belief-space safety filter. The
//! interesting content lives in `benches/`; this library only hosts shared
//! setup helpers for those benchmarks.

use nalgebra::{DMatrix, DVector};

use bcbf::{
    obstacle_halfspace, unicycle_model, unicycle_observation, BarrierConstraint,
    ConstraintGeometry, FilterOptions, GaussianBelief, SafetyFilter,
};

/// A mid-flight unicycle belief heading toward an obstacle: the filter is
/// near-active, which is the representative (and expensive) regime.
pub fn unicycle_snapshot() -> GaussianBelief {
    let mean = DVector::from_vec(vec![3.2, 0.4, 1.4, -0.2]);
    let mut cov = DMatrix::identity(4, 4) * 0.02;
    cov[(2, 2)] = 0.01;
    cov[(3, 3)] = 0.005;
    GaussianBelief::new(mean, cov).expect("snapshot belief is valid")
}

/// The matching filter session with one obstacle constraint.
pub fn unicycle_filter() -> SafetyFilter {
    let b = unicycle_snapshot();
    let center = DVector::from_vec(vec![5.0, 0.0]);
    let hs = obstacle_halfspace(&b, &center, 1.0, 0.1).expect("snapshot is off-center");
    let constraint = BarrierConstraint::second_order("obstacle", hs, [4.0, 4.0])
        .expect("gains are Hurwitz")
        .with_geometry(ConstraintGeometry::Obstacle {
            center,
            radius: 1.0,
            differentiate_alpha: false,
        });
    let opts = FilterOptions {
        epsilon: 0.01,
        risk_margins: true,
        bounds: Some((
            DVector::from_vec(vec![-5.0, -4.0]),
            DVector::from_vec(vec![5.0, 4.0]),
        )),
        slack_weight: Some(1e6),
    };
    SafetyFilter::new(vec![constraint], opts)
}

/// Model/observation pair for the snapshot.
pub fn unicycle_setup() -> (bcbf::SystemModel, bcbf::ObservationModel) {
    (unicycle_model(), unicycle_observation())
}
