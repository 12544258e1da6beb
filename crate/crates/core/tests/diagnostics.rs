use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shape_core::diagnostics::*;
use shape_core::dynamics::{PhasePoint, StepConfig, StructureOps, LYAPUNOV_EPS};

fn structured_stage(d: usize, seed: u64) -> LinearStage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_spd(d, 0.5, 4.0, &mut rng);
    let rank = 2;
    let mut ops = StructureOps::plain(d, rank);
    ops.mass = (0..d).map(|_| rng.gen_range(0.5..2.0)).collect();
    ops.u_omega = gaussian_vec(d * rank, 0.5, &mut rng);
    ops.v_omega = gaussian_vec(d * rank, 0.5, &mut rng);
    ops.b_d = gaussian_vec(d * rank, 0.3, &mut rng);
    ops.d_d = (0..d).map(|_| rng.gen_range(0.3..1.0)).collect();
    LinearStage { a, q_star: gaussian_vec(d, 0.5, &mut rng), ops, alpha_j: 1.0, alpha_r: 1.0 }
}

fn start(d: usize, seed: u64) -> PhasePoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    PhasePoint { q: gaussian_vec(d, 1.0, &mut rng), p: gaussian_vec(d, 1.0, &mut rng) }
}

/// Sampling oracle: `-dV/dt / V` along the continuous flow at random states.
fn sampled_min_rate(stage: &LinearStage, eps: f64, draws: usize) -> f64 {
    let d = stage.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = f64::INFINITY;
    for _ in 0..draws {
        let q: Vec<f64> = gaussian_vec(d, 1.0, &mut rng).iter().zip(&stage.q_star).map(|(a, b)| a + b).collect();
        let p = gaussian_vec(d, 1.0, &mut rng);
        let v = stage.ops.velocity(&p);
        let g = stage.gradient(&q);
        let om = stage.ops.skew(&v);
        let dm = stage.ops.psd(&v);
        let pdot: Vec<f64> = (0..d).map(|i| -g[i] + stage.alpha_j * om[i] - stage.alpha_r * dm[i] - stage.ops.k_d[i] * v[i]).collect();
        // dV = grad_q V . qdot + grad_p V . pdot
        let e: Vec<f64> = q.iter().zip(&stage.q_star).map(|(a, b)| a - b).collect();
        let dq: f64 = (0..d).map(|i| (g[i] + eps * p[i]) * v[i]).sum();
        let dp: f64 = (0..d).map(|i| (v[i] + eps * e[i]) * pdot[i]).sum();
        let x = PhasePoint { q, p };
        worst = worst.min(-(dq + dp) / stage.lyapunov(&x, eps));
    }
    worst
}

#[test]
fn continuous_rate_matches_sampled_bound() {
    for seed in 0..4 {
        let stage = structured_stage(3, seed);
        let c = stage.continuous_rate(LYAPUNOV_EPS);
        let sampled = sampled_min_rate(&stage, LYAPUNOV_EPS, 20_000);
        assert!(sampled >= c - 1e-9, "sampled {sampled} below closed form {c}");
        assert!(sampled - c < 0.05 * c.abs().max(1e-3), "sampled {sampled} far above {c}");
    }
}

#[test]
fn lyapunov_vanishes_at_equilibrium() {
    let stage = structured_stage(4, 1);
    let x = PhasePoint::at_rest(stage.q_star.clone());
    assert_eq!(stage.lyapunov(&x, LYAPUNOV_EPS), 0.0);
    let y = start(4, 2);
    assert!((stage.lyapunov(&y, 0.0) - stage.hamiltonian(&y)).abs() < 1e-15);
}

#[test]
fn lyapunov_is_bracketed_by_the_state_norm() {
    // eigen-bound oracle: for a quadratic V = z^T P z, c1 = lambda_min(P), c2 = lambda_max(P)
    let stage = LinearStage::damped(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]));
    let mut p = DMatrix::zeros(4, 4);
    p.view_mut((0, 0), (2, 2)).copy_from(&(&stage.a * 0.5));
    for i in 0..2 {
        p[(i, i + 2)] = 0.5 * LYAPUNOV_EPS;
        p[(i + 2, i)] = 0.5 * LYAPUNOV_EPS;
        p[(i + 2, i + 2)] = 0.5;
    }
    let eig = p.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let x = PhasePoint { q: gaussian_vec(2, 1.0, &mut rng), p: gaussian_vec(2, 1.0, &mut rng) };
        let n2: f64 = x.q.iter().chain(&x.p).map(|v| v * v).sum();
        let v = stage.lyapunov(&x, LYAPUNOV_EPS);
        assert!(v >= lo * n2 - 1e-12 && v <= hi * n2 + 1e-12);
    }
}

#[test]
fn energy_defect_halves_with_the_step() {
    let stage = structured_stage(4, 7);
    let study = energy_halving_study(&stage, &start(4, 7), &[0.05, 0.025, 0.0125], 2.0).unwrap();
    for r in &study.ratios {
        assert!((r - 2.0).abs() <= 0.3, "{study:?}");
    }
}

#[test]
fn bare_quadratic_residual_is_first_order() {
    let mut stage = LinearStage::damped(DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 3.0]));
    stage.alpha_r = 0.0;
    let study = energy_halving_study(&stage, &start(2, 1), &[0.04, 0.02, 0.01], 3.0).unwrap();
    assert!(study.ratios.iter().all(|r| (r - 2.0).abs() < 0.3), "{study:?}");
}

#[test]
fn damped_energy_never_rises_beyond_its_defect() {
    let stage = structured_stage(3, 4);
    let h = 0.02;
    let run = stage.simulate(&start(3, 4), &StepConfig { h, p_max: f64::INFINITY, q_max: f64::INFINITY }, 300).unwrap();
    let res = energy_residuals(&stage, &run, h);
    let defect = res.iter().map(|r| r.abs()).fold(0.0, f64::max);
    for w in run.states.windows(2) {
        assert!(stage.hamiltonian(&w[1]) - stage.hamiltonian(&w[0]) <= h * defect + 1e-15);
    }
}

#[test]
fn identity_stage_contracts() {
    let stage = LinearStage::damped(DMatrix::identity(3, 3));
    let r = contraction_fit(&stage, &start(3, 0), 0.01, LYAPUNOV_EPS, 200.0).unwrap();
    assert!(r.pass && r.monotone, "{r:?}");
    assert!(r.rate > 0.0);
}

#[test]
fn undamped_stage_is_conservative() {
    let mut stage = LinearStage::damped(DMatrix::identity(2, 2));
    stage.alpha_r = 0.0;
    let r = contraction_fit(&stage, &start(2, 0), 0.01, LYAPUNOV_EPS, 60.0).unwrap();
    assert!(r.conservative && !r.pass, "{r:?}");
}

#[test]
fn fitted_rate_is_stable_under_step_halving() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let stage = LinearStage::damped(random_spd(5, 0.5, 4.0, &mut rng));
    let reps = contraction_suite(&stage, &start(5, 11), &[0.02, 0.01, 0.005], LYAPUNOV_EPS, 200.0).unwrap();
    for w in reps.windows(2) {
        assert!((w[0].rate / w[1].rate - 1.0).abs() < 0.1, "{reps:?}");
    }
}

#[test]
fn random_spd_stages_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..20 {
        let d = rng.gen_range(1..=8);
        let stage = LinearStage::damped(random_spd(d, 0.5, 4.0, &mut rng));
        let r = contraction_fit(&stage, &start(d, k), 0.01, LYAPUNOV_EPS, 200.0).unwrap();
        assert!(r.pass && r.monotone, "stage {k}: {r:?}");
    }
}

#[test]
fn defect_ledger_without_clipping() {
    let stage = structured_stage(3, 2);
    let c = stage.continuous_rate(LYAPUNOV_EPS);
    assert!(c > 0.0);
    let h = 0.02;
    let run = stage.simulate(&start(3, 2), &StepConfig { h, p_max: f64::INFINITY, q_max: f64::INFINITY }, 400).unwrap();
    let l = defect_suite(&stage, &run, h, c, LYAPUNOV_EPS).unwrap();
    assert_eq!(l.projection, 0.0);
    assert_eq!(l.port_work, 0.0);
    assert!(l.holds, "{l:?}");
    assert!(l.terminal <= l.total_error);
}

#[test]
fn defect_ledger_records_clipping() {
    let mut stage = LinearStage::damped(DMatrix::identity(2, 2));
    stage.q_star = vec![1.5, -1.5];
    let h = 0.05;
    let run = stage.simulate(&PhasePoint::at_rest(vec![0.0, 0.0]), &StepConfig { h, p_max: 10.0, q_max: 1.0 }, 200).unwrap();
    let l = defect_suite(&stage, &run, h, stage.continuous_rate(LYAPUNOV_EPS), LYAPUNOV_EPS).unwrap();
    assert!(l.projection > 0.0, "{l:?}");
    assert!(l.holds);
}

#[test]
fn truncation_channel_halves_with_the_step() {
    let stage = structured_stage(3, 9);
    let c = stage.continuous_rate(LYAPUNOV_EPS);
    let x0 = start(3, 9);
    let ledger = |h: f64| {
        let run = stage.simulate(&x0, &StepConfig { h, p_max: f64::INFINITY, q_max: f64::INFINITY }, (8.0 / h) as usize).unwrap();
        defect_suite(&stage, &run, h, c, LYAPUNOV_EPS).unwrap()
    };
    let (a, b) = (ledger(0.02), ledger(0.01));
    let ratio = a.truncation / b.truncation;
    assert!((ratio - 2.0).abs() < 0.4, "{ratio}: {a:?} {b:?}");
}

#[test]
fn port_work_is_itemised() {
    let mut stage = LinearStage::damped(DMatrix::identity(2, 2));
    stage.ops.u_shp = vec![0.3, -0.2];
    let h = 0.02;
    let run = stage.simulate(&start(2, 3), &StepConfig { h, p_max: f64::INFINITY, q_max: f64::INFINITY }, 500).unwrap();
    let l = defect_suite(&stage, &run, h, stage.continuous_rate(LYAPUNOV_EPS), LYAPUNOV_EPS).unwrap();
    assert!(l.port_work > 0.0 && l.holds, "{l:?}");
}

#[test]
fn stochastic_floor_grows_with_variance() {
    let stage = LinearStage::damped(DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 1.0]));
    let x0 = PhasePoint::at_rest(vec![0.0, 0.0]);
    let sizes = (600, 1500, 64);
    let rep = stochastic_floor_suite(&stage, &x0, 0.05, &[0.0, 0.5, 1.0, 2.0], LYAPUNOV_EPS, sizes, 1).unwrap();
    assert!(rep.pass, "{rep:?}");
    // at rest on the minimum the deterministic part is exactly zero
    assert_eq!(rep.floors[0], 0.0);
    let ratio = rep.floors[3] / rep.floors[2];
    assert!((ratio - 4.0).abs() < 0.4, "{ratio}");
    let half = stochastic_floor(&stage, &x0, 0.025, 1.0, LYAPUNOV_EPS, (1200, 3000, 64), 1).unwrap();
    let r = rep.floors[2] / half;
    assert!((r - 2.0).abs() < 0.4, "floor vs h: {r}");
}

#[test]
fn structure_identities_hold_for_random_controllers() {
    let r = structure_suite(2000, 3).unwrap();
    assert!(r.pass, "{r:?}");
}
