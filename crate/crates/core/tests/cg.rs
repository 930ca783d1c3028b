use std::cell::Cell;

use gcrf::cg::DenseOperator;
use gcrf::oracle::{assemble_dense, direct_solve, ExplicitSystem};
use gcrf::synth::{random_embeddings, random_vector, sample_rng};
use gcrf::{cg_solve, CgConfig, Dims, Error, GcrfLayer, Matrix, SpdOperator, Vector};
use proptest::prelude::*;

fn low_rank_layer(n: usize, d: usize, seed: u64) -> (GcrfLayer, Vector) {
    let mut rng = sample_rng(seed, (n * 100 + d) as u64);
    let e = random_embeddings(d, n, &mut rng);
    let b = random_vector(n, &mut rng);
    let layer = GcrfLayer::new(e, 1.0, Dims::new(n, 1, d).unwrap(), CgConfig::default()).unwrap();
    (layer, b)
}

fn rel_diff(a: &Vector, b: &Vector) -> f64 {
    a.add_scaled(-1.0, b).unwrap().norm() / b.norm()
}

#[test]
fn identity_system_in_one_iteration() {
    let dims = Dims::new(5, 1, 2).unwrap();
    let layer = GcrfLayer::unary_only(dims, 1.0, CgConfig::default()).unwrap();
    let b = Vector::new(vec![1.0, -3.0, 0.5, 2.0, 9.0]).unwrap();
    let (x, report) = cg_solve(&layer, &b, &CgConfig::default(), None).unwrap();
    assert!(report.converged);
    assert!(report.iterations <= 1);
    assert_eq!(x, b);
}

#[test]
fn hand_solvable_two_by_two() {
    let m = Matrix::new(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
    let op = DenseOperator::new(&m).unwrap();
    let b = Vector::new(vec![3.0, 3.0]).unwrap();
    let (x, report) = cg_solve(&op, &b, &CgConfig::default(), None).unwrap();
    assert!(report.converged);
    assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
}

#[test]
fn zero_rhs_converges_immediately() {
    let (layer, _) = low_rank_layer(10, 2, 0);
    let (x, report) = cg_solve(&layer, &Vector::zeros(10), &CgConfig::default(), None).unwrap();
    assert_eq!(report.iterations, 0);
    assert!(report.converged);
    assert_eq!(x.max_abs(), 0.0);
}

#[test]
fn random_low_rank_converges_within_d_plus_two() {
    let (layer, b) = low_rank_layer(200, 8, 1);
    let (x, report) = cg_solve(&layer, &b, &CgConfig::default(), None).unwrap();
    assert!(report.converged);
    assert!(report.iterations <= 10, "{} iterations", report.iterations);
    assert!(report.final_residual_norm <= 1e-10 * b.norm());

    let dense = assemble_dense(layer.embeddings(), 1.0).unwrap();
    let direct = direct_solve(&ExplicitSystem::new(dense, b.clone()).unwrap()).unwrap();
    assert!(rel_diff(&x, &direct) <= 1e-8);
}

#[test]
fn energy_trace_is_non_increasing() {
    for seed in 0..10 {
        let (layer, b) = low_rank_layer(150, 12, seed);
        let cfg = CgConfig {
            record_energy: true,
            ..Default::default()
        };
        let (x, report) = cg_solve(&layer, &b, &cfg, None).unwrap();
        let trace = report.energy_trace.unwrap();
        assert_eq!(trace.len(), report.iterations + 1);
        assert_eq!(trace[0], 0.0);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0), "{w:?}");
        }
        let final_energy = layer.energy(&x, &b).unwrap();
        assert!((final_energy - trace.last().unwrap()).abs() <= 1e-12 * final_energy.abs());
    }
}

#[test]
fn solves_are_bit_identical() {
    let (layer, b) = low_rank_layer(300, 16, 4);
    let (x1, r1) = cg_solve(&layer, &b, &CgConfig::default(), None).unwrap();
    let (x2, r2) = cg_solve(&layer, &b, &CgConfig::default(), None).unwrap();
    assert_eq!(r1, r2);
    for (a, c) in x1.as_slice().iter().zip(x2.as_slice()) {
        assert_eq!(a.to_bits(), c.to_bits());
    }
}

#[test]
fn warm_start_from_solution() {
    let (layer, b) = low_rank_layer(100, 4, 2);
    let (x, _) = cg_solve(&layer, &b, &CgConfig::default(), None).unwrap();
    let (x2, report) = cg_solve(&layer, &b, &CgConfig::default(), Some(&x)).unwrap();
    assert!(report.converged);
    assert!(report.iterations <= 1);
    assert!(rel_diff(&x2, &x) < 1e-12);
}

#[test]
fn non_convergence_returns_flagged_iterate() {
    let n = 60;
    let diag = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 + i as f64 } else { 0.0 }).unwrap();
    let op = DenseOperator::new(&diag).unwrap();
    let b = Vector::from_fn(n, |i| 1.0 + (i % 3) as f64).unwrap();
    let cfg = CgConfig {
        max_iters: Some(3),
        ..Default::default()
    };
    let (x, report) = cg_solve(&op, &b, &cfg, None).unwrap();
    assert!(!report.converged);
    assert_eq!(report.iterations, 3);
    let true_residual = op_residual(&op, &x, &b);
    assert!((true_residual - report.final_residual_norm).abs() <= 1e-9 * b.norm());
    assert!(report.final_residual_norm < b.norm());
}

fn op_residual(op: &impl SpdOperator, x: &Vector, b: &Vector) -> f64 {
    let mut ax = vec![0.0; x.len()];
    op.apply_into(x.as_slice(), &mut ax);
    ax.iter()
        .zip(b.as_slice())
        .map(|(a, c)| (a - c) * (a - c))
        .sum::<f64>()
        .sqrt()
}

struct PoisonedOperator {
    calls: Cell<usize>,
    poison_at: usize,
}

impl SpdOperator for PoisonedOperator {
    fn dim(&self) -> usize {
        4
    }

    fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        self.calls.set(self.calls.get() + 1);
        for (i, (o, x)) in out.iter_mut().zip(v).enumerate() {
            *o = (1.0 + i as f64) * x;
        }
        if self.calls.get() == self.poison_at {
            out[0] = f64::NAN;
        }
    }
}

#[test]
fn nan_names_the_iteration() {
    let op = PoisonedOperator {
        calls: Cell::new(0),
        poison_at: 2,
    };
    let b = Vector::new(vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    match cg_solve(&op, &b, &CgConfig::default(), None) {
        Err(Error::Numeric { iteration, .. }) => assert_eq!(iteration, 2),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn indefinite_operator_is_reported() {
    let m = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap();
    let op = DenseOperator::new(&m).unwrap();
    let b = Vector::new(vec![0.0, 1.0]).unwrap();
    assert!(matches!(
        cg_solve(&op, &b, &CgConfig::default(), None),
        Err(Error::Numeric { .. })
    ));
}

#[test]
fn config_and_shape_errors() {
    let (layer, b) = low_rank_layer(10, 2, 0);
    let bad = CgConfig {
        rel_tol: 0.0,
        ..Default::default()
    };
    assert!(matches!(cg_solve(&layer, &b, &bad, None), Err(Error::Config(_))));
    let bad = CgConfig {
        max_iters: Some(0),
        ..Default::default()
    };
    assert!(cg_solve(&layer, &b, &bad, None).is_err());
    assert!(matches!(
        cg_solve(&layer, &Vector::zeros(9), &CgConfig::default(), None),
        Err(Error::Shape { .. })
    ));
    assert!(cg_solve(&layer, &b, &CgConfig::default(), Some(&Vector::zeros(3))).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn low_rank_iteration_bound(n in 16usize..=512, r in 1usize..=32, seed in 0u64..1000) {
        let r = r.min(n);
        let (layer, b) = low_rank_layer(n, r, seed);
        let cfg = CgConfig { rel_tol: 1e-8, abs_tol: 0.0, ..Default::default() };
        let (_, report) = cg_solve(&layer, &b, &cfg, None).unwrap();
        prop_assert!(report.converged);
        prop_assert!(report.iterations <= r + 2, "n={} r={} iters={}", n, r, report.iterations);
    }
}
