use std::f64::consts::{E, PI};

use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shape_core::tasks::multiwell::{GLOBAL_MARGIN, HALF_WIDTH};
use shape_core::tasks::*;
use shape_core::TaskError;

fn opts(wells: usize) -> TaskOptions {
    TaskOptions { wells, ..TaskOptions::default() }
}

fn multiwell(wells: usize, seed: u64) -> Multiwell {
    match make_task(Family::Multiwell, 1, seed, &opts(wells)).unwrap().kind {
        TaskKind::Multiwell(m) => m,
        _ => unreachable!(),
    }
}

/// Sign changes of f' on a uniform grid: (minima, maxima) strictly inside (-K, K).
fn grid_scan(task: &Task, points: usize) -> (usize, usize) {
    let k = HALF_WIDTH;
    let xs: Vec<f64> = (1..points).map(|i| -k + 2.0 * k * i as f64 / points as f64).collect();
    let d: Vec<f64> = xs.iter().map(|&x| task.grad(&[x]).unwrap()[0]).collect();
    let (mut mins, mut maxs) = (0, 0);
    let mut last = 0.0;
    for &g in &d {
        if g == 0.0 {
            continue;
        }
        if last < 0.0 && g > 0.0 {
            mins += 1;
        }
        if last > 0.0 && g < 0.0 {
            maxs += 1;
        }
        last = g;
    }
    (mins, maxs)
}

#[test]
fn two_well_layout() {
    let m = multiwell(2, 11);
    // interior knots valley, barrier, valley plus the two boundary knots
    assert_eq!(m.knots.len(), 5);
    assert!(m.values[1] < m.values[2] && m.values[3] < m.values[2]);
    let other = if m.global == 1 { 3 } else { 1 };
    assert!((m.values[other] - m.values[m.global] - GLOBAL_MARGIN).abs() < 1e-12);
    assert!(m.knots.windows(2).all(|w| w[1] - w[0] >= 2.0 * HALF_WIDTH / 8.0 - 1e-12));
}

#[test]
fn knots_interpolate_with_zero_slope() {
    for seed in 0..20 {
        let m = multiwell(4, seed);
        for (x, v) in m.knots.iter().zip(&m.values) {
            let (f, g) = m.value_grad(*x);
            assert_eq!(f, *v);
            assert_eq!(g, 0.0);
        }
    }
}

#[test]
fn grid_scan_finds_every_well() {
    for wells in 1..=5 {
        for seed in 0..10 {
            let t = make_task(Family::Multiwell, 1, seed, &opts(wells)).unwrap();
            assert_eq!(grid_scan(&t, 100_000), (wells, wells - 1), "wells {wells} seed {seed}");
        }
    }
}

#[test]
fn reference_is_the_global_valley() {
    let t = make_task(Family::Multiwell, 1, 4, &opts(3)).unwrap();
    let r = t.reference();
    let (x, v) = match &t.kind {
        TaskKind::Multiwell(m) => m.global_min(),
        _ => unreachable!(),
    };
    assert_eq!((r.q[0], r.f), (x, v));
    let dense = (0..=20_000).map(|i| t.value(&[-5.0 + 10.0 * i as f64 / 20_000.0]).unwrap());
    assert!(dense.fold(f64::INFINITY, f64::min) >= v);
}

#[test]
fn walls_are_quadratic_outside_the_domain() {
    let m = multiwell(2, 3);
    let (f, g) = m.value_grad(5.2);
    assert!((f - m.values[0] - 25.0 * 0.04).abs() < 1e-12);
    assert!((g - 10.0).abs() < 1e-12);
    assert_eq!(m.value_grad(-5.2).0, f);
}

fn ackley_oracle(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let s1: f64 = x.iter().map(|v| v * v).sum();
    let s2: f64 = x.iter().map(|v| (2.0 * PI * v).cos()).sum();
    -20.0 * (-0.2 * (s1 / n).sqrt()).exp() - (s2 / n).exp() + 20.0 + E
}

fn zero_shift(base: BaseFunction, d: usize) -> Task {
    Task::from_kind(Family::Ackley, d, 0, TaskKind::Benchmark(Benchmark { base, shift: vec![0.0; d], rotation: None }))
}

#[test]
fn standard_benchmarks_vanish_at_the_origin() {
    for base in [BaseFunction::Ackley, BaseFunction::Rastrigin, BaseFunction::Levy] {
        let (f, g) = zero_shift(base, 3).value_grad(&[0.0; 3]).unwrap();
        assert!(f.abs() < 1e-14, "{base:?} {f}");
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn unrotated_ackley_has_identity_frame() {
    let t = make_task(Family::Ackley, 2, 9, &TaskOptions::default()).unwrap();
    let TaskKind::Benchmark(b) = &t.kind else { unreachable!() };
    assert!(b.rotation.is_none());
    assert!(b.shift.iter().all(|s| s.abs() <= 5.0));
    assert_eq!(t.reference().q, b.shift);
    assert_eq!(t.reference().f, 0.0);
}

#[test]
fn rotated_benchmark_matches_straight_line_formula() {
    let rot = TaskOptions { rotation: true, ..TaskOptions::default() };
    for seed in 0..10 {
        let t = make_task(Family::Ackley, 5, seed, &rot).unwrap();
        let TaskKind::Benchmark(b) = &t.kind else { unreachable!() };
        let r = b.rotation.as_ref().unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = (0..5).map(|k| r[i * 5 + k] * r[j * 5 + k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
        let q = t.start_for(seed);
        let z: Vec<f64> = q.iter().zip(&b.shift).map(|(a, s)| a - s).collect();
        let x: Vec<f64> = (0..5).map(|i| (0..5).map(|k| r[i * 5 + k] * z[k]).sum()).collect();
        assert!((t.value(&q).unwrap() - ackley_oracle(&x)).abs() < 1e-12);
    }
}

fn lj_pair(eps: f64, sigma: f64) -> Task {
    let opts = TaskOptions { lj_epsilon: eps, lj_sigma: sigma, ..TaskOptions::default() };
    make_task(Family::Lj, 6, 0, &opts).unwrap()
}

#[test]
fn lj_pair_minimum_is_minus_epsilon() {
    for (eps, sigma) in [(1.0, 1.0), (0.7, 1.3), (2.5, 0.8)] {
        let t = lj_pair(eps, sigma);
        let r = 2f64.powf(1.0 / 6.0) * sigma;
        let (f, g) = t.value_grad(&[0.0, 0.0, 0.0, r, 0.0, 0.0]).unwrap();
        assert!((f + eps).abs() <= 1e-12, "{f}");
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        assert!((t.reference().f + eps).abs() <= 1e-12);
    }
}

#[test]
fn lj_rejects_coincident_atoms() {
    let t = lj_pair(1.0, 1.0);
    assert!(matches!(t.value(&[0.3; 6]), Err(TaskError::SingularConfiguration { .. })));
}

#[test]
fn lj_energy_is_invariant_under_rigid_motions_and_relabelling() {
    let t = make_task(Family::Lj, 15, 2, &TaskOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in 0..20 {
        let q = t.start_for(p);
        let f = t.value(&q).unwrap();
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let rot = Rotation3::from_scaled_axis(axis);
        let shift = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mut moved = Vec::new();
        for i in (0..5).rev() {
            let v = rot * Vector3::new(q[3 * i], q[3 * i + 1], q[3 * i + 2]) + shift;
            moved.extend_from_slice(v.as_slice());
        }
        let g = t.value(&moved).unwrap();
        assert!((f - g).abs() <= 1e-9 * (1.0 + f.abs()));
        assert!(t.distance(&moved) - t.distance(&q) < 1e-9);
    }
}

#[test]
fn phase_objective_is_sign_invariant() {
    let t = make_task(Family::Phase, 8, 1, &TaskOptions { phase_noise: 0.05, ..TaskOptions::default() }).unwrap();
    for p in 0..10 {
        let q = t.start_for(p);
        let neg: Vec<f64> = q.iter().map(|v| -v).collect();
        assert!((t.value(&q).unwrap() - t.value(&neg).unwrap()).abs() < 1e-9);
        assert!((t.distance(&q) - t.distance(&neg)).abs() < 1e-12);
    }
    assert!(t.reference().proxy);
}

#[test]
fn control_at_rest_is_stationary() {
    let task = ControlTask::new(ControlSystem::DoubleIntegrator, 10, [0.0, 0.0], [0.0, 0.0]);
    let t = Task::from_kind(Family::Control, 10, 0, TaskKind::Control(task));
    let (f, g) = t.value_grad(&[0.0; 10]).unwrap();
    assert_eq!(f, 0.0);
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn invalid_dimensions_are_rejected() {
    assert!(make_task(Family::Multiwell, 2, 0, &TaskOptions::default()).is_err());
    assert!(make_task(Family::Lj, 7, 0, &TaskOptions::default()).is_err());
    assert!(make_task(Family::Ackley, 0, 0, &TaskOptions::default()).is_err());
    assert!(make_task(Family::Multiwell, 1, 0, &opts(0)).is_err());
    let t = make_task(Family::Ackley, 2, 0, &TaskOptions::default()).unwrap();
    assert!(matches!(t.value(&[0.0; 3]), Err(TaskError::DimensionMismatch { expected: 2, got: 3 })));
}

/// Central differences with step `h`; returns the relative error of `g` against them.
fn fd_rel_error(t: &Task, q: &[f64], h: f64) -> f64 {
    let g = t.grad(q).unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..q.len() {
        let mut a = q.to_vec();
        let mut b = q.to_vec();
        a[i] += h;
        b[i] -= h;
        let fd = (t.value(&a).unwrap() - t.value(&b).unwrap()) / (2.0 * h);
        num += (g[i] - fd).powi(2);
        den += fd * fd;
    }
    num.sqrt() / den.sqrt().max(1.0)
}

#[test]
fn ackley_gradient_at_unit_point() {
    let t = zero_shift(BaseFunction::Ackley, 2);
    assert!(fd_rel_error(&t, &[1.0, 1.0], 1e-6) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn same_seed_same_task(seed in any::<u64>(), fam in 0usize..7) {
        let family = Family::BENCHMARK[fam];
        let dim = match family { Family::Multiwell => 1, Family::Lj => 9, _ => 4 };
        let a = make_task(family, dim, seed, &TaskOptions::default()).unwrap();
        let b = make_task(family, dim, seed, &TaskOptions::default()).unwrap();
        prop_assert_eq!(&a.kind, &b.kind);
        prop_assert_eq!(a.start_for(3), b.start_for(3));
    }

    #[test]
    fn multiwell_valleys_are_ordered(seed in any::<u64>(), wells in 1usize..7) {
        let m = multiwell(wells, seed);
        prop_assert!(m.knots.windows(2).all(|w| w[1] > w[0]));
        prop_assert_eq!(m.global % 2, 1);
        for i in (1..m.knots.len() - 1).step_by(2) {
            if i != m.global {
                prop_assert!(m.values[i] - m.values[m.global] >= GLOBAL_MARGIN - 1e-12);
            }
        }
    }

    #[test]
    fn benchmark_gradients_match_differences(seed in any::<u64>(), fam in 0usize..3, d in 1usize..12, rot: bool) {
        let family = [Family::Ackley, Family::Levy, Family::Rastrigin][fam];
        let t = make_task(family, d, seed, &TaskOptions { rotation: rot, ..TaskOptions::default() }).unwrap();
        let q = t.start_for(seed % 7);
        prop_assert!(fd_rel_error(&t, &q, 1e-6) <= 1e-5);
    }
}
