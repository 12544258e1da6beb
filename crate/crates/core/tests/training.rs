use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shape_core::dynamics::{Mode, StageContext};
use shape_core::memory::{Memory, MemoryConfig};
use shape_core::oracle::OracleKind;
use shape_core::policy::{context_features, Policy, EVENT_HORIZON};
use shape_core::shape_loop::{policy_config, run, ShapeConfig};
use shape_core::tasks::{make_task, Family, Quadratic, Task, TaskKind, TaskOptions};
use shape_core::training::{
    phase1_loss, phase2_loss, probe_teacher, rollout_loss, teacher_force, ProbeConfig, StageSample, TeacherLabel,
    TrainConfig, Trainer,
};

fn line_quadratic(center: f64) -> Task {
    Task::from_kind(
        Family::Quadratic,
        1,
        3,
        TaskKind::Quadratic(Quadratic { a: vec![1.0], center: vec![center], half_width: 5.0 }),
    )
}

fn empty_memory(task: &Task) -> Memory {
    Memory::new(task.dim, task.half_width(), &MemoryConfig::default())
}

#[test]
fn downhill_probe_wins_and_labels_refine() {
    let task = line_quadratic(-4.0);
    let (f, g) = task.value_grad(&[2.0]).unwrap();
    let mem = empty_memory(&task);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let l = probe_teacher(&task, &[2.0], &[0.0], f, &g, &mem, false, &ProbeConfig::default(), &mut rng).unwrap();
    assert!(l.anchor[0] < 2.0);
    assert!(l.improve > 0.0);
    assert_eq!(l.mode, Mode::Refine);
    assert_eq!(l.calls, 8);
}

#[test]
fn stalled_minimum_labels_escape() {
    let task = line_quadratic(0.5);
    let (f, g) = task.value_grad(&[0.5]).unwrap();
    let mem = empty_memory(&task);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let l = probe_teacher(&task, &[0.5], &[0.0], f, &g, &mem, true, &ProbeConfig::default(), &mut rng).unwrap();
    assert!(l.improve <= 0.0);
    assert_eq!(l.mode, Mode::Escape);
}

#[test]
fn teacher_is_deterministic_under_a_fixed_rng() {
    let task = make_task(Family::Ackley, 3, 4, &TaskOptions::default()).unwrap();
    let q = task.start_for(0);
    let (f, g) = task.value_grad(&q).unwrap();
    let mem = empty_memory(&task);
    let a = probe_teacher(&task, &q, &[0.1, 0.0, 0.0], f, &g, &mem, false, &ProbeConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = probe_teacher(&task, &q, &[0.1, 0.0, 0.0], f, &g, &mem, false, &ProbeConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn teacher_force_degenerates_to_negative_gradient() {
    let probe = ProbeConfig { c_g: 0.0, c_p: 0.0, ..ProbeConfig::default() };
    let label = TeacherLabel {
        anchor: vec![3.0, 3.0],
        mode: Mode::Settle,
        score: 0.0,
        improve: 0.0,
        novel_dir: vec![1.0, 0.0],
        calls: 0,
    };
    let f = teacher_force(&[1.5, -2.0], &[0.0, 1.0], &[4.0, 4.0], &label, &probe);
    assert_eq!(f, vec![-1.5, 2.0]);
    let esc = TeacherLabel { mode: Mode::Escape, ..label };
    let f = teacher_force(&[1.5, -2.0], &[0.0, 1.0], &[4.0, 4.0], &esc, &probe);
    assert_eq!(f, vec![-1.0, 2.0]);
}

fn sample_for(task: &Task, policy: &Policy, q: Vec<f64>, p: Vec<f64>, label: TeacherLabel) -> StageSample {
    let (f, g) = task.value_grad(&q).unwrap();
    let mem = empty_memory(task);
    let features = context_features(&g, f, &task.descriptor(), &mem.read(&q));
    let (context, _) = shape_core::policy::plan(policy, &q, &p, &features, task.unit(), task.q_max()).unwrap();
    let force = teacher_force(&g, &q, &p, &label, &ProbeConfig::default());
    StageSample {
        g_mem: vec![0.0; q.len()],
        q,
        p,
        f,
        g,
        features,
        context,
        label,
        force,
        unit: task.unit(),
        q_max: task.q_max(),
    }
}

#[test]
fn uniform_logits_and_small_anchor_error() {
    let task = make_task(Family::Quadratic, 2, 1, &TaskOptions::default()).unwrap();
    let cfg = TrainConfig::default();
    let policy = Policy::zeros(policy_config(&task, 8, &cfg.shape.memory));
    let q = vec![0.3, -0.2];
    let delta = 1e-3;
    let label = TeacherLabel {
        anchor: vec![0.3 + delta, -0.2],
        mode: Mode::Escape,
        score: 0.0,
        improve: 0.0,
        novel_dir: vec![1.0, 0.0],
        calls: 0,
    };
    let s = sample_for(&task, &policy, q, vec![0.0, 0.0], label);
    let (loss, _) = phase2_loss(&policy, &s, &cfg).unwrap();
    let want = 0.40 * 3f64.ln() + 0.25 * delta * delta / 2.0;
    assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
}

fn flat_params(p: &Policy) -> Vec<f64> {
    p.controller.params().iter().chain(p.planner.params().iter()).flat_map(|t| t.data().to_vec()).collect()
}

fn perturbed(p: &Policy, idx: usize, eps: f64) -> Policy {
    let mut q = p.clone();
    let mut k = idx;
    let mut c = q.controller.params_mut();
    let mut pl = q.planner.params_mut();
    for t in c.iter_mut().chain(pl.iter_mut()) {
        if k < t.len() {
            t.data_mut()[k] += eps;
            return q;
        }
        k -= t.len();
    }
    panic!("index out of range")
}

fn flat_grads(g: &[shape_numeric::Tensor]) -> Vec<f64> {
    g.iter().flat_map(|t| t.data().to_vec()).collect()
}

fn fd_indices(n: usize) -> Vec<usize> {
    (0..n).step_by((n / 37).max(1)).chain([n - 1]).collect()
}

#[test]
fn phase1_gradient_matches_finite_differences() {
    let task = make_task(Family::Rastrigin, 2, 9, &TaskOptions::default()).unwrap();
    let cfg = TrainConfig::default();
    let policy = Policy::new(policy_config(&task, 8, &cfg.shape.memory), &mut ChaCha8Rng::seed_from_u64(2));
    let label = TeacherLabel {
        anchor: vec![0.4, -0.1],
        mode: Mode::Refine,
        score: 0.0,
        improve: 0.0,
        novel_dir: vec![0.0, 1.0],
        calls: 0,
    };
    let s = sample_for(&task, &policy, vec![0.3, 0.2], vec![0.7, -1.1], label);
    let (_, g) = phase1_loss(&policy, &s, &cfg).unwrap();
    let g = flat_grads(&g);
    let n_ctrl: usize = policy.controller.params().iter().map(|t| t.len()).sum();
    for i in fd_indices(n_ctrl) {
        let eps = 1e-6;
        let lp = phase1_loss(&perturbed(&policy, i, eps), &s, &cfg).unwrap().0;
        let lm = phase1_loss(&perturbed(&policy, i, -eps), &s, &cfg).unwrap().0;
        let fd = (lp - lm) / (2.0 * eps);
        assert!((fd - g[i]).abs() <= 1e-4 * (1.0 + fd.abs()), "param {i}: fd {fd} tape {}", g[i]);
    }
    // the planner is frozen in this phase
    assert!(g[n_ctrl..].iter().all(|&x| x == 0.0));
}

fn one_step_config() -> TrainConfig {
    let mut cfg = TrainConfig { family: Family::Ackley, dim: 2, ..TrainConfig::default() };
    cfg.schedule.train_rollout = 2;
    cfg
}

#[test]
fn rollout_gradient_matches_finite_differences() {
    let cfg = one_step_config();
    let task = make_task(Family::Ackley, 2, 12, &TaskOptions::default()).unwrap();
    let policy = Policy::new(policy_config(&task, 8, &cfg.shape.memory), &mut ChaCha8Rng::seed_from_u64(4));
    let q0 = vec![1.3, -0.7];
    let base = rollout_loss(&policy, &task, &q0, 0, &cfg).unwrap().unwrap();
    let g = flat_grads(&base.grads);
    assert!(g.iter().any(|&x| x != 0.0));
    let n = flat_params(&policy).len();
    let n_ctrl: usize = policy.controller.params().iter().map(|t| t.len()).sum();
    assert!(g[..n_ctrl].iter().any(|&x| x != 0.0));
    assert!(g[n_ctrl..].iter().any(|&x| x != 0.0));
    for i in fd_indices(n) {
        let eps = 1e-6;
        let lp = rollout_loss(&perturbed(&policy, i, eps), &task, &q0, 0, &cfg).unwrap().unwrap().parts.total;
        let lm = rollout_loss(&perturbed(&policy, i, -eps), &task, &q0, 0, &cfg).unwrap().unwrap().parts.total;
        let fd = (lp - lm) / (2.0 * eps);
        assert!((fd - g[i]).abs() <= 1e-4 * (1.0 + fd.abs()), "param {i}: fd {fd} tape {}", g[i]);
    }
}

#[test]
fn zero_policy_first_step_has_no_port_cost() {
    let cfg = one_step_config();
    let task = make_task(Family::Ackley, 2, 12, &TaskOptions::default()).unwrap();
    let policy = Policy::zeros(policy_config(&task, 8, &cfg.shape.memory));
    let r = rollout_loss(&policy, &task, &[1.0, 1.0], 0, &cfg).unwrap().unwrap();
    assert_eq!(r.parts.ctrl, 0.0);
    assert_eq!(r.parts.port, 0.0);
}

#[test]
fn loss_components_are_consistent_on_longer_rollouts() {
    let mut cfg = TrainConfig { family: Family::Levy, dim: 3, ..TrainConfig::default() };
    cfg.schedule.train_rollout = 60;
    for seed in 0..6 {
        let task = make_task(Family::Levy, 3, seed, &TaskOptions::default()).unwrap();
        let policy = Policy::new(policy_config(&task, 8, &cfg.shape.memory), &mut ChaCha8Rng::seed_from_u64(seed));
        let r = rollout_loss(&policy, &task, &task.start_for(seed), seed, &cfg).unwrap().unwrap();
        let p = r.parts;
        assert!(p.best <= p.term + 1e-15);
        assert!(p.ctrl >= 0.0 && p.jr >= 0.0 && p.port >= 0.0 && p.prog >= 0.0 && p.plan_sup >= 0.0);
        assert_eq!(r.queried.len(), 60);
        assert_eq!(r.probe_calls % 8, 0);
    }
}

#[test]
fn recorded_rollout_follows_the_evaluation_loop() {
    let mut cfg = TrainConfig { family: Family::Rastrigin, dim: 2, soft_modes: false, ..TrainConfig::default() };
    cfg.schedule.train_rollout = 90;
    let shape = ShapeConfig { early_stop: false, ..ShapeConfig::default() };
    for seed in 0..4 {
        let task = make_task(Family::Rastrigin, 2, seed, &TaskOptions::default()).unwrap();
        let policy = Policy::new(policy_config(&task, 16, &shape.memory), &mut ChaCha8Rng::seed_from_u64(seed + 10));
        let q0 = task.start_for(seed);
        let rec = rollout_loss(&policy, &task, &q0, 3, &cfg).unwrap().unwrap();
        let tr = run(&task, &policy, OracleKind::Exact, 90, &q0, 3, &shape).unwrap();
        assert_eq!(rec.queried.len(), tr.rows.len());
        for (a, b) in rec.queried.iter().zip(&tr.rows) {
            for (x, y) in a.iter().zip(&b.q) {
                assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
            }
        }
    }
}

#[test]
fn local_pretraining_reduces_its_loss() {
    let mut cfg = TrainConfig::default();
    cfg.schedule.batch = 16;
    cfg.schedule.hidden = 16;
    let mut tr = Trainer::new(cfg).unwrap();
    let fixed = tr.stage_batch().unwrap();
    let first = tr.phase1_update(&fixed, 0).unwrap();
    let mut last = first;
    for _ in 0..60 {
        last = tr.phase1_update(&fixed, 0).unwrap();
    }
    assert!(last < first, "{first} -> {last}");
    assert!(tr.probe_calls > 0);
}

#[test]
fn trainer_runs_a_short_schedule() {
    let mut cfg = TrainConfig::default();
    cfg.schedule.batch = 4;
    cfg.schedule.hidden = 8;
    cfg.schedule.pretrain = 2;
    cfg.schedule.epochs = 2;
    cfg.schedule.train_rollout = 30;
    let mut tr = Trainer::new(cfg).unwrap();
    let mut seen = Vec::new();
    tr.train(&mut |e, _| seen.push(e)).unwrap();
    assert_eq!(seen, vec![1, 2]);
    // 2 + 2 pretraining updates, then (2 + 2) per epoch
    assert_eq!(tr.log.len(), 4 + 8);
    assert!(tr.log.iter().all(|r| r.parts.total.is_finite()));
    let _ = StageContext {
        anchor: vec![],
        mode: Mode::Settle,
        alpha_j_bar: 0.0,
        alpha_r_bar: 0.0,
        kappa_bar: 0.0,
        horizon: EVENT_HORIZON,
    };
}
