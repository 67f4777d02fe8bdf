//! Criterion benchmarks for the hot control-loop path: one full safety
//! filter step, the bare QP solve, and one hybrid belief integration step.

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::{DMatrix, DVector};
use std::hint::black_box;

use bcbf::{hybrid_step, solve_qp, QPProblem};
use bcbf_bench::{unicycle_filter, unicycle_setup, unicycle_snapshot};

fn bench_filter_step(c: &mut Criterion) {
    let (model, obs) = unicycle_setup();
    let b = unicycle_snapshot();
    let u_ref = DVector::from_vec(vec![1.0, 0.3]);
    c.bench_function("filter_step_unicycle_obstacle", |bench| {
        let mut filter = unicycle_filter();
        bench.iter(|| {
            let out = filter
                .step(black_box(&b), &model, &obs, black_box(&u_ref))
                .expect("snapshot step is feasible");
            black_box(out.u[0])
        })
    });
}

fn bench_qp(c: &mut Criterion) {
    let qp = QPProblem {
        u_ref: DVector::from_vec(vec![1.0, 0.3]),
        rows: vec![
            (DVector::from_vec(vec![0.9, -0.2]), -0.4),
            (DVector::from_vec(vec![-0.3, 1.1]), -1.0),
        ],
        bounds: Some((
            DVector::from_vec(vec![-5.0, -4.0]),
            DVector::from_vec(vec![5.0, 4.0]),
        )),
        slack_weight: Some(1e6),
    };
    c.bench_function("qp_two_rows_with_box", |bench| {
        bench.iter(|| black_box(solve_qp(black_box(&qp)).expect("feasible").u[0]))
    });
}

fn bench_hybrid_step(c: &mut Criterion) {
    let (model, obs) = unicycle_setup();
    let b = unicycle_snapshot();
    let u = DVector::from_vec(vec![0.5, 0.1]);
    let z = DVector::from_vec(vec![3.25, 0.38, 1.41, -0.21]);
    c.bench_function("hybrid_step_flow_only", |bench| {
        bench.iter(|| {
            let next = hybrid_step(black_box(&b), &model, &obs, &u, 1e-3, None).unwrap();
            black_box(next.mean()[0])
        })
    });
    c.bench_function("hybrid_step_with_update", |bench| {
        bench.iter(|| {
            let next = hybrid_step(black_box(&b), &model, &obs, &u, 1e-3, Some(&z)).unwrap();
            black_box(next.mean()[0])
        })
    });
    let _ = DMatrix::<f64>::zeros(1, 1);
}

criterion_group!(benches, bench_filter_step, bench_qp, bench_hybrid_step);
criterion_main!(benches);
