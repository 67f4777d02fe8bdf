//! Agreement checks against independently rebuilt reference implementations.
//!
//! Every comparison here pits a library routine against an oracle in
//! `common` that shares no code with it: quadrature against the polynomial
//! error-function approximation, bisection against the rational inverse,
//! information-form conditioning against the Kalman gain form, subset
//! enumeration against the active-set QP, and finite differences of an
//! independently integrated belief flow against the dual-number Lie
//! derivatives.

mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bcbf::special::{erf, erfc, erfinv};
use bcbf::{
    hybrid_step, kalman_update, lie_derivatives, prob_halfspace, solve_qp, var_value,
    BarrierConstraint, GaussianBelief, ObservationModel, QPProblem, RiskHalfSpace, SystemModel,
};

fn random_spd(rng: &mut ChaCha8Rng, n: usize, ridge: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * ridge
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
}

#[test]
fn erf_matches_quadrature_to_1e12() {
    let mut worst: f64 = 0.0;
    for i in 0..=240 {
        let x = -6.0 + i as f64 * 0.05;
        worst = worst.max((erf(x) - erf_oracle(x)).abs());
        // The complement must agree with 1 - erf to the same precision.
        worst = worst.max((erfc(x) - (1.0 - erf_oracle(x))).abs());
    }
    assert!(worst <= 1e-12, "max |erf - quadrature| = {worst:.3e}");
}

#[test]
fn erfinv_matches_bisection_to_1e12() {
    let mut worst: f64 = 0.0;
    for i in 0..=40 {
        let p = -0.998 + i as f64 * 0.0499;
        let lib = erfinv(p).expect("p inside (-1, 1)");
        worst = worst.max((lib - erfinv_oracle(p)).abs());
        // Library round trip.
        worst = worst.max((erf(lib) - p).abs());
    }
    // A deep-tail point exercises the asymptotic branch.
    let p = 1.0 - 2e-9;
    let lib = erfinv(p).expect("p inside (-1, 1)");
    worst = worst.max((erf(lib) - p).abs());
    assert!(worst <= 1e-12, "max erfinv disagreement = {worst:.3e}");
    assert!(erfinv(1.0).is_err() && erfinv(-1.0).is_err());
}

#[test]
fn halfspace_probability_matches_gaussian_cdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=4);
        let mu = random_vector(&mut rng, n, 3.0);
        let sigma = random_spd(&mut rng, n, 0.3);
        let b = GaussianBelief::new(mu.clone(), sigma.clone()).unwrap();
        let alpha = random_vector(&mut rng, n, 2.0);
        if alpha.norm() < 1e-6 {
            continue;
        }
        let beta = rng.gen_range(-3.0..3.0);
        let p = prob_halfspace(&b, &alpha, beta).unwrap();
        let dir_sd = alpha.dot(&(&sigma * &alpha)).sqrt();
        let want = gauss_cdf_oracle((alpha.dot(&mu) - beta) / dir_sd);
        worst = worst.max((p - want).abs());
    }
    assert!(worst <= 1e-12, "max probability error = {worst:.3e}");
}

#[test]
fn var_barrier_matches_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=4);
        let mu = random_vector(&mut rng, n, 3.0);
        let sigma = random_spd(&mut rng, n, 0.3);
        let b = GaussianBelief::new(mu.clone(), sigma.clone()).unwrap();
        let alpha = random_vector(&mut rng, n, 2.0);
        if alpha.norm() < 1e-6 {
            continue;
        }
        let beta = rng.gen_range(-3.0..3.0);
        let delta = rng.gen_range(0.001..0.5);
        let gamma = rng.gen_range(0.0..0.5);
        let hs = RiskHalfSpace::new(alpha.clone(), beta, delta)
            .unwrap()
            .with_gamma(gamma)
            .unwrap();
        let lib = var_value(&b, &hs).unwrap();
        let want = var_barrier_oracle(&mu, &sigma, &alpha, beta, delta, gamma);
        worst = worst.max((lib - want).abs());
    }
    assert!(worst <= 1e-12, "max barrier error = {worst:.3e}");
}

#[test]
fn kalman_update_matches_information_form_conditioning() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(1..=5);
        let l = rng.gen_range(1..=n);
        let mu = random_vector(&mut rng, n, 2.0);
        let sigma = random_spd(&mut rng, n, 0.4);
        let h = DMatrix::from_fn(l, n, |_, _| rng.gen_range(-1.0..1.0));
        let r = random_spd(&mut rng, l, 0.2);
        let z = random_vector(&mut rng, l, 2.5);
        let b = GaussianBelief::new(mu.clone(), sigma.clone()).unwrap();
        let obs = ObservationModel::linear(h.clone(), r.clone(), 10.0).unwrap();
        let posterior = kalman_update(&b, &obs, &z).unwrap();
        let (mu_want, sigma_want) = condition_gaussian_oracle(&mu, &sigma, &h, &r, &z);
        worst = worst.max((posterior.mean() - &mu_want).amax());
        worst = worst.max((posterior.cov() - &sigma_want).amax());
    }
    assert!(worst <= 1e-10, "max conditioning gap = {worst:.3e}");
}

#[test]
fn scalar_belief_flow_matches_closed_form() {
    // dx = a x dt + b u dt + dw with constant input: both moments have
    // elementary closed forms to integrate against.
    let (a, bu, q) = (-0.4_f64, 0.7_f64, 0.13_f64);
    let model = SystemModel::linear(
        DMatrix::from_element(1, 1, a),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, q),
    )
    .unwrap();
    let obs = ObservationModel::linear(
        DMatrix::identity(1, 1),
        DMatrix::from_element(1, 1, 0.1),
        10.0,
    )
    .unwrap();
    let mut b = GaussianBelief::new(
        DVector::from_element(1, 2.0),
        DMatrix::from_element(1, 1, 0.3),
    )
    .unwrap();
    let u = DVector::from_element(1, bu);
    let dt = 1e-3;
    let steps = 1000;
    for _ in 0..steps {
        b = hybrid_step(&b, &model, &obs, &u, dt, None).unwrap();
    }
    let t = dt * steps as f64;
    let mu_want = scalar_mean_flow(a, bu, 2.0, t);
    let var_want = scalar_variance_flow(a, q, 0.3, t);
    assert!(
        (b.mean()[0] - mu_want).abs() <= 1e-10,
        "mean {} vs closed form {}",
        b.mean()[0],
        mu_want
    );
    assert!(
        (b.cov()[(0, 0)] - var_want).abs() <= 1e-10,
        "variance {} vs closed form {}",
        b.cov()[(0, 0)],
        var_want
    );
}

/// Barrier value along the independently integrated belief flow, as a
/// function of lookahead time.
fn barrier_along_oracle_flow(
    b0: &OracleBelief,
    model: &SystemModel,
    u: &DVector<f64>,
    hs: &RiskHalfSpace,
    t: f64,
) -> f64 {
    let steps = 40;
    let fb = if t > 0.0 {
        flow_belief_oracle(b0, model, u, t, steps)
    } else if t < 0.0 {
        // Integrate the reversed-time field by flowing the negated ODE:
        // reuse the forward integrator on small backward steps.
        let mut cur = b0.clone();
        let n = 40;
        let dt = t / n as f64; // negative
        for _ in 0..n {
            // One RK4 step with negative dt via the forward routine's algebra.
            cur = flow_belief_oracle(&cur, model, u, dt, 1);
        }
        cur
    } else {
        b0.clone()
    };
    var_barrier_oracle(
        &fb.mu,
        &fb.sigma,
        hs.alpha(),
        hs.beta(),
        hs.delta(),
        hs.gamma(),
    )
}

#[test]
fn lie_derivatives_match_finite_differences_of_independent_flow() {
    let model = bcbf::unicycle_model();
    let mu = DVector::from_vec(vec![1.2, 0.4, 1.5, 0.3]);
    let sigma = {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        random_spd(&mut rng, 4, 0.2) * 0.05
    };
    let b = GaussianBelief::new(mu.clone(), sigma.clone()).unwrap();
    let ob = OracleBelief {
        mu: mu.clone(),
        sigma: sigma.clone(),
    };
    let alpha = DVector::from_vec(vec![0.6, -0.8, 0.0, 0.0]);
    let hs = RiskHalfSpace::new(alpha, -2.0, 0.05).unwrap();
    let u = DVector::from_vec(vec![0.8, -0.5]);

    // First-order constraint: compare h and d/dt h.
    let c1 = BarrierConstraint::first_order("probe", hs.clone());
    let ld1 = lie_derivatives(&b, &model, &c1).unwrap();
    let h_fd = barrier_along_oracle_flow(&ob, &model, &u, &hs, 0.0);
    assert!((ld1.h - h_fd).abs() <= 1e-10, "barrier value mismatch");
    let tau = 1e-4;
    let hdot_fd = (barrier_along_oracle_flow(&ob, &model, &u, &hs, tau)
        - barrier_along_oracle_flow(&ob, &model, &u, &hs, -tau))
        / (2.0 * tau);
    let hdot_lib = ld1.lf_h + ld1.lg_h.dot(&u);
    let rel = (hdot_lib - hdot_fd).abs() / hdot_fd.abs().max(1e-6);
    assert!(rel <= 1e-5, "h_dot: lib {hdot_lib} vs fd {hdot_fd}");

    // Second-order constraint: compare d^2/dt^2 h as well.
    let c2 = BarrierConstraint::second_order("probe2", hs.clone(), [4.0, 4.0]).unwrap();
    let ld2 = lie_derivatives(&b, &model, &c2).unwrap();
    let tau2 = 2e-3;
    let hpp = barrier_along_oracle_flow(&ob, &model, &u, &hs, tau2);
    let h00 = barrier_along_oracle_flow(&ob, &model, &u, &hs, 0.0);
    let hmm = barrier_along_oracle_flow(&ob, &model, &u, &hs, -tau2);
    let hddot_fd = (hpp - 2.0 * h00 + hmm) / (tau2 * tau2);
    let hddot_lib = ld2.lf2_h.unwrap() + ld2.lglf_h.as_ref().unwrap().dot(&u);
    let rel2 = (hddot_lib - hddot_fd).abs() / hddot_fd.abs().max(1e-6);
    assert!(rel2 <= 1e-4, "h_ddot: lib {hddot_lib} vs fd {hddot_fd}");
}

#[test]
fn qp_solution_matches_subset_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for _ in 0..300 {
        let m = rng.gen_range(1..=3);
        let n_rows = rng.gen_range(1..=4);
        let u_ref = random_vector(&mut rng, m, 2.0);
        let rows: Vec<(DVector<f64>, f64)> = (0..n_rows)
            .map(|_| {
                (
                    random_vector(&mut rng, m, 1.5),
                    rng.gen_range(-2.0..1.0),
                )
            })
            .filter(|(a, _)| a.amax() > 1e-3)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let p = QPProblem {
            u_ref: u_ref.clone(),
            rows: rows.clone(),
            bounds: None,
            slack_weight: None,
        };
        let oracle = project_polytope_oracle(&u_ref, &rows, 1e-9);
        match (solve_qp(&p), oracle) {
            (Ok(sol), Some(want)) => {
                worst = worst.max((&sol.u - &want).amax());
                assert!(
                    sol.kkt_residual <= 1e-8,
                    "KKT residual {:.3e}",
                    sol.kkt_residual
                );
                compared += 1;
            }
            (Err(bcbf::Error::Infeasible { .. }), None) => {}
            (lib, want) => panic!("feasibility disagreement: lib {lib:?} vs oracle {want:?}"),
        }
    }
    assert!(compared >= 100, "only {compared} feasible comparisons");
    assert!(worst <= 1e-10, "max projection gap = {worst:.3e}");
}

#[test]
fn qp_with_bounds_matches_subset_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let m = rng.gen_range(1..=3);
        let u_ref = random_vector(&mut rng, m, 3.0);
        let lo = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..-0.2));
        let hi = DVector::from_fn(m, |_, _| rng.gen_range(0.2..2.0));
        let row: (DVector<f64>, f64) = (random_vector(&mut rng, m, 1.5), -0.5);
        if row.0.amax() < 1e-3 {
            continue;
        }
        let p = QPProblem {
            u_ref: u_ref.clone(),
            rows: vec![row.clone()],
            bounds: Some((lo.clone(), hi.clone())),
            slack_weight: None,
        };
        // Express the box as rows for the oracle.
        let mut rows = vec![row];
        for i in 0..m {
            let mut e = DVector::zeros(m);
            e[i] = 1.0;
            rows.push((e.clone(), lo[i]));
            rows.push((-e, -hi[i]));
        }
        let oracle = project_polytope_oracle(&u_ref, &rows, 1e-9);
        match (solve_qp(&p), oracle) {
            (Ok(sol), Some(want)) => worst = worst.max((&sol.u - &want).amax()),
            (Err(bcbf::Error::Infeasible { .. }), None) => {}
            (lib, want) => panic!("feasibility disagreement: lib {lib:?} vs oracle {want:?}"),
        }
    }
    assert!(worst <= 1e-10, "max projection gap = {worst:.3e}");
}

#[test]
fn slack_relaxation_matches_lifted_enumeration() {
    // Deliberately contradictory rows force the slack path; the oracle
    // projects in the lifted (u, sqrt(w) s) space the solver also uses.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    let mut engaged = 0;
    for _ in 0..100 {
        let m = rng.gen_range(1..=2);
        let w = 10f64.powf(rng.gen_range(1.0..5.0));
        let u_ref = random_vector(&mut rng, m, 1.0);
        let a = random_vector(&mut rng, m, 1.5);
        if a.amax() < 1e-2 {
            continue;
        }
        // a' u >= 1 and -a' u >= 0.3 cannot both hold strictly.
        let rows = vec![(a.clone(), 1.0), (-a.clone(), 0.3)];
        let p = QPProblem {
            u_ref: u_ref.clone(),
            rows: rows.clone(),
            bounds: None,
            slack_weight: Some(w),
        };
        let sol = solve_qp(&p).unwrap();
        assert!(sol.slack_used && sol.slack > 0.0);
        engaged += 1;
        // Lifted oracle: y = (u, y_s), y_s = sqrt(w) s; each soft row gains
        // a 1/sqrt(w) slack coefficient and s >= 0 is appended.
        let sw = w.sqrt();
        let mut y0 = DVector::zeros(m + 1);
        for i in 0..m {
            y0[i] = u_ref[i];
        }
        let mut lifted: Vec<(DVector<f64>, f64)> = rows
            .iter()
            .map(|(a, b)| {
                let mut r = DVector::zeros(m + 1);
                for i in 0..m {
                    r[i] = a[i];
                }
                r[m] = 1.0 / sw;
                (r, *b)
            })
            .collect();
        let mut pos = DVector::zeros(m + 1);
        pos[m] = 1.0;
        lifted.push((pos, 0.0));
        let want = project_polytope_oracle(&y0, &lifted, 1e-9).expect("lifted QP is feasible");
        for i in 0..m {
            worst = worst.max((sol.u[i] - want[i]).abs());
        }
        worst = worst.max((sol.slack - want[m] / sw).abs());
    }
    assert!(engaged >= 80, "only {engaged} slack engagements");
    assert!(worst <= 1e-9, "max lifted-projection gap = {worst:.3e}");
}
