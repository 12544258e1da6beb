use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shape_bench::cli::{self, Cli};
use shape_bench::config::{parse_config, BenchConfig};
use shape_bench::harness::{call_grid, mean_curves, run_benchmark, run_method, BenchSpec, MethodSpec};
use shape_bench::metrics::{count_minima, summarize, trace_metrics, MetricsRow, SCHEMA_VERSION};
use shape_bench::plot::render_svg;
use shape_bench::report::{BenchReport, Stat};
use shape_bench::table::{read_curves, read_rows, write_curves, write_rows};
use shape_core::baselines::{Hparams, Method};
use shape_core::oracle::OracleKind;
use shape_core::policy::Policy;
use shape_core::shape_loop::{policy_config, ShapeConfig};
use shape_core::tasks::{make_task, Family, TaskKind, TaskOptions};

#[test]
fn constant_trajectory_at_the_optimum() {
    let task = make_task(Family::Ackley, 3, 2, &TaskOptions::default()).unwrap();
    let q = task.reference().q.clone();
    let m = trace_metrics(&task, &q, &vec![q.clone(); 5]).unwrap();
    // Ackley evaluates to a few ulps at its minimizer
    for v in [m.final_gap, m.best_gap, m.auc_gap, m.final_dist] {
        assert!(v.abs() <= 1e-12, "{v}");
    }
    assert!(m.hit);
}

#[test]
fn gap_arithmetic() {
    let m = summarize(&[3.0, 1.0, 2.0], &[0.5, 0.2, 0.3], 1.0);
    assert_eq!((m.final_gap, m.best_gap, m.auc_gap), (2.0, 1.0, 2.0));
    assert!(m.hit);
}

#[test]
fn phase_distance_is_sign_aligned() {
    let task = make_task(Family::Phase, 6, 4, &TaskOptions::default()).unwrap();
    let neg: Vec<f64> = task.reference().q.iter().map(|x| -x).collect();
    let m = trace_metrics(&task, &neg, &[neg.clone()]).unwrap();
    assert_eq!(m.final_dist, 0.0);
}

fn double_well() -> shape_core::tasks::Task {
    make_task(Family::Multiwell, 1, 3, &TaskOptions { wells: 2, ..TaskOptions::default() }).unwrap()
}

#[test]
fn minima_counting_examples() {
    let task = double_well();
    let TaskKind::Multiwell(mw) = &task.kind else { unreachable!() };
    let (a, b) = (mw.knots[1], mw.knots[3]);
    let pinned = vec![vec![a]; 6];
    assert_eq!(count_minima(&task, &pinned).unwrap(), Some(1));
    let mut sweep: Vec<Vec<f64>> = vec![vec![a]; 4];
    let n = 40;
    sweep.extend((1..n).map(|i| vec![a + (b - a) * i as f64 / n as f64]));
    sweep.extend(vec![vec![b]; 4]);
    assert_eq!(count_minima(&task, &sweep).unwrap(), Some(2));
    // a descent that stops mid-slope never reaches a flat point
    let (lo, hi) = (mw.knots[1], mw.knots[2]);
    let walk: Vec<Vec<f64>> = (0..10).map(|i| vec![hi - (hi - lo) * (0.3 + 0.03 * i as f64)]).collect();
    assert_eq!(count_minima(&task, &walk).unwrap(), Some(0));
    let lj = make_task(Family::Lj, 9, 0, &TaskOptions::default()).unwrap();
    assert_eq!(count_minima(&lj, &[lj.start_for(0)]).unwrap(), None);
}

fn small_spec(methods: Vec<MethodSpec>, oracle: OracleKind, budget: u64) -> BenchSpec {
    BenchSpec {
        blocks: vec![(Family::Ackley, 2), (Family::Multiwell, 1)],
        n_tasks: 3,
        seed: 5,
        task: TaskOptions::default(),
        oracle,
        budget,
        particles: 2,
        methods,
        shape: ShapeConfig::default(),
    }
}

fn shape_method(family: Family, dim: usize) -> MethodSpec {
    let task = make_task(family, dim, 0, &TaskOptions::default()).unwrap();
    let pc = policy_config(&task, 8, &ShapeConfig::default().memory);
    MethodSpec::Shape { label: "shape".into(), policy: Arc::new(Policy::new(pc, &mut ChaCha8Rng::seed_from_u64(1))) }
}

#[test]
fn budgets_match_exactly_across_methods() {
    let mut methods: Vec<MethodSpec> = Method::ALL.iter().map(|&m| MethodSpec::Baseline { method: m, hparams: None }).collect();
    methods.push(shape_method(Family::Ackley, 2));
    let spec = BenchSpec { blocks: vec![(Family::Ackley, 2)], ..small_spec(methods, OracleKind::Stochastic { sigma: 0.1 }, 97) };
    let out = run_benchmark(&spec).unwrap();
    assert_eq!(out.rows.len(), 3 * 2 * (Method::ALL.len() + 1));
    for r in &out.rows {
        assert_eq!(r.oracle_calls + r.shortfall, r.budget, "{}", r.method);
        if r.method != "shape" {
            assert_eq!(r.shortfall, 97 % Method::from_name(&r.method).calls_per_iteration());
        }
        assert!(r.best_gap <= r.final_gap);
        assert!(r.auc_gap.is_finite() && r.auc_best_gap.is_finite());
    }
}

trait FromName {
    fn from_name(s: &str) -> Method;
}
impl FromName for Method {
    fn from_name(s: &str) -> Method {
        s.parse().unwrap()
    }
}

#[test]
fn zeroth_order_runs_spend_two_k_per_estimate() {
    let methods = vec![MethodSpec::Baseline { method: Method::Adam, hparams: None }, shape_method(Family::Ackley, 2)];
    let spec = BenchSpec { blocks: vec![(Family::Ackley, 2)], ..small_spec(methods, OracleKind::ZerothOrder { eps: 1e-3, k: 3 }, 100) };
    for r in run_benchmark(&spec).unwrap().rows {
        assert_eq!(r.oracle_calls % 6, 0);
        assert_eq!(r.oracle_calls + r.shortfall, 100);
    }
}

#[test]
fn paired_streams_give_identical_noise() {
    let task = make_task(Family::Rastrigin, 3, 8, &TaskOptions::default()).unwrap();
    let q0 = task.start_for(1);
    let oracle = OracleKind::Stochastic { sigma: 0.7 };
    let step = |lr: f64| {
        let m = MethodSpec::Baseline { method: Method::Gd, hparams: Some(Hparams::Gd { lr }) };
        let out = run_method(&m, &task, oracle, 3, &q0, 1, &ShapeConfig::default()).unwrap();
        // the second queried point is q0 - lr * g~(q0)
        out.points[1].iter().zip(&q0).map(|(a, b)| (b - a) / lr).collect::<Vec<f64>>()
    };
    let (g1, g2) = (step(0.01), step(0.003));
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }
}

#[test]
fn shared_starts_across_methods() {
    let methods = vec![
        MethodSpec::Baseline { method: Method::Gd, hparams: None },
        MethodSpec::Baseline { method: Method::Nag, hparams: None },
    ];
    let spec = small_spec(methods, OracleKind::Exact, 1);
    let out = run_benchmark(&spec).unwrap();
    // with one call each method only queries its start
    for pair in out.rows.chunks(2) {
        assert_eq!(pair[0].task_id, pair[1].task_id);
        assert_eq!(pair[0].final_gap, pair[1].final_gap);
    }
}

#[test]
fn report_matches_recomputation() {
    let methods = vec![
        MethodSpec::Baseline { method: Method::Adam, hparams: None },
        MethodSpec::Baseline { method: Method::Momentum, hparams: None },
    ];
    let out = run_benchmark(&small_spec(methods, OracleKind::Exact, 60)).unwrap();
    let rep = BenchReport::from_rows(&out.rows);
    for a in &rep.aggregates {
        let sel: Vec<&MetricsRow> =
            out.rows.iter().filter(|r| r.family == a.family && r.dim == a.dim && r.method == a.method).collect();
        let best: Vec<f64> = sel.iter().map(|r| r.best_gap).collect();
        let s = Stat::of(&best);
        let got = rep.mean(&a.family, a.dim, &a.method, "best_gap").unwrap();
        assert!((got - s.mean).abs() <= 1e-12);
        let hits = sel.iter().map(|r| r.hit as f64).sum::<f64>() / sel.len() as f64;
        assert!((rep.mean(&a.family, a.dim, &a.method, "hit_rate").unwrap() - hits).abs() <= 1e-12);
    }
    // exactly one best marker per block unless tied
    assert!(rep.aggregates.iter().any(|a| a.best[2]));
    assert!(rep.to_markdown().contains("| adam |"));
}

#[test]
fn median_and_std() {
    let s = Stat::of(&[1.0, 3.0, 2.0, 10.0]);
    assert_eq!(s.median, 2.5);
    assert_eq!(s.mean, 4.0);
    assert!((s.std - (((9.0 + 1.0 + 4.0 + 36.0) / 4.0) as f64).sqrt()).abs() < 1e-15);
}

fn row_strategy() -> impl Strategy<Value = MetricsRow> {
    let real = prop_oneof![any::<f64>().prop_filter("finite", |x| x.is_finite()), Just(f64::INFINITY), Just(0.0)];
    (
        ("[a-z]{1,8}", 1usize..600, any::<u64>(), "[a-z_]{1,10}"),
        (real.clone(), real.clone(), real.clone(), real.clone(), real.clone(), real),
        (0u8..2, any::<u64>(), proptest::option::of(any::<u64>()), any::<u64>(), any::<u64>(), any::<bool>()),
    )
        .prop_map(|((fam, dim, seed, method), (a, b, c, d, e, f), (hit, calls, minima, sur, part, proxy))| MetricsRow {
            task_id: format!("{fam}-d{dim}-s{seed}"),
            family: fam,
            dim,
            seed,
            method,
            oracle: "stochastic".into(),
            final_dist: a,
            final_gap: b,
            best_gap: c,
            auc_gap: d,
            auc_dist: e,
            auc_best_gap: f,
            hit,
            oracle_calls: calls,
            minima_visited: minima,
            wall_ms: a.abs(),
            surcharge_calls: sur,
            aux_calls: sur / 2,
            shortfall: sur % 7,
            particle: part,
            budget: calls,
            proxy_reference: proxy,
            schema_version: SCHEMA_VERSION,
        })
}

proptest! {
    #[test]
    fn csv_round_trip(rows in proptest::collection::vec(row_strategy(), 0..8)) {
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        let back = read_rows(buf.as_slice()).unwrap();
        prop_assert_eq!(back, rows);
    }
}

#[test]
fn reals_carry_seventeen_significant_digits() {
    let mut buf = Vec::new();
    let row = MetricsRow {
        task_id: "t".into(),
        family: "ackley".into(),
        dim: 2,
        seed: 1,
        method: "gd".into(),
        oracle: "exact".into(),
        final_dist: 0.1,
        final_gap: 1.0 / 3.0,
        best_gap: 0.0,
        auc_gap: 0.0,
        auc_dist: 0.0,
        auc_best_gap: 0.0,
        hit: 1,
        oracle_calls: 3,
        minima_visited: None,
        wall_ms: 0.0,
        surcharge_calls: 0,
        aux_calls: 0,
        shortfall: 0,
        particle: 0,
        budget: 3,
        proxy_reference: false,
        schema_version: SCHEMA_VERSION,
    };
    write_rows(&mut buf, &[row]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.contains("3.3333333333333331e-1"), "{text}");
    assert!(text.contains(",NA,"));
}

#[test]
fn curves_round_trip_and_plot() {
    let methods = vec![
        MethodSpec::Baseline { method: Method::Adam, hparams: None },
        MethodSpec::Baseline { method: Method::Gd, hparams: None },
    ];
    let out = run_benchmark(&small_spec(methods, OracleKind::Exact, 40)).unwrap();
    let curves = mean_curves(&out.curves);
    assert_eq!(curves.len(), 4);
    for c in &curves {
        assert!(c.values.windows(2).all(|w| w[1] <= w[0]), "best-so-far curve must not rise");
    }
    let mut buf = Vec::new();
    write_curves(&mut buf, &out.grid, &curves).unwrap();
    let (grid, back) = read_curves(buf.as_slice()).unwrap();
    assert_eq!(grid, call_grid(40));
    assert_eq!(back, curves);
    let svg = render_svg("ackley <d=2>", &grid, &back[..2]);
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains("&lt;d=2&gt;"));
}

#[test]
fn config_sections_and_env_overrides() {
    let text = r#"
[task]
blocks = ["ackley:2", "multiwell:1"]
n_tasks = 4
[oracle]
kind = "stochastic"
sigma = 0.2
[methods]
baselines = ["gd", "adam"]
[budget]
calls = 128
particles = 256
"#;
    let env = vec![
        ("SHAPE_BUDGET_CALLS".to_string(), "256".to_string()),
        ("SHAPE_BUDGET_PARTICLES".to_string(), "128".to_string()),
        ("SHAPE_ORACLE_KIND".to_string(), "exact".to_string()),
        ("SHAPE_TRAIN_FAMILY".to_string(), "ackley".to_string()),
        ("OTHER_VAR".to_string(), "x".to_string()),
    ];
    let cfg = parse_config(text, env).unwrap();
    assert_eq!(cfg.budget.calls * cfg.budget.particles as u64, 32768);
    assert_eq!(cfg.oracle.kind().unwrap(), OracleKind::Exact);
    assert_eq!(cfg.train.family, "ackley");
    let spec = cfg.spec().unwrap();
    assert_eq!(spec.blocks, vec![(Family::Ackley, 2), (Family::Multiwell, 1)]);
    assert_eq!(spec.methods.len(), 2);
}

#[test]
fn config_errors_report_lines() {
    let err = parse_config("[task]\nn_tasks = \"many\"\n", Vec::new()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = parse_config("[task]\nn_tasks = 3\n[budget]\ncals = 5\n", Vec::new()).unwrap_err();
    assert!(err.to_string().contains("cals"), "{err}");
    let err = parse_config("[task\n", Vec::new()).unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
}

#[test]
fn ablation_training_switches() {
    let mut cfg = BenchConfig::default();
    cfg.train.local_controller = false;
    cfg.train.memory = false;
    let tc = cfg.train.train_config().unwrap();
    assert_eq!((tc.schedule.pretrain, tc.schedule.controller_updates), (0, 0));
    let task = make_task(Family::Multiwell, 1, 0, &tc.task).unwrap();
    assert_eq!(policy_config(&task, 8, &tc.shape.memory).readout_len, 0);
}

#[test]
fn cli_exit_codes() {
    use clap::Parser;
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[budget]\ncalls = -3\n").unwrap();
    let code = cli::run(Cli::parse_from(["shape", "bench", bad.to_str().unwrap()]));
    assert_eq!(code, 2);
    let good = dir.path().join("good.toml");
    std::fs::write(&good, "[task]\nn_tasks = 2\n[methods]\nbaselines = [\"gd\", \"lionk\"]\n[budget]\ncalls = 30\n").unwrap();
    let out = dir.path().join("run");
    let code = cli::run(Cli::parse_from(["shape", "bench", good.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert_eq!(code, 0);
    let rows = read_rows(std::fs::File::open(out.join("rows.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(out.join("plots/best_gap_ackley_d2.svg").exists());
    let plots = dir.path().join("replot");
    let code = cli::run(Cli::parse_from([
        "shape",
        "plot",
        out.join("curves.csv").to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    assert!(plots.join("best_gap_ackley_d2.svg").exists());
}

#[test]
fn cli_train_then_eval() {
    use clap::Parser;
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train");
    let o = out.to_str().unwrap();
    let code = cli::run(Cli::parse_from([
        "shape", "train", "--epochs", "2", "--pretrain", "1", "--batch", "2", "--hidden", "8", "--out", o,
    ]));
    assert_eq!(code, 0);
    let losses = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 2 + 2 * 4);
    let ck = out.join("policy.ckpt");
    let rows = dir.path().join("eval.csv");
    let code = cli::run(Cli::parse_from([
        "shape", "eval", "--checkpoint", ck.to_str().unwrap(), "--family", "multiwell", "--dim", "1",
        "--budget", "50", "--tasks", "3", "--out", rows.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    assert_eq!(read_rows(std::fs::File::open(rows).unwrap()).unwrap().len(), 3);
    let code = cli::run(Cli::parse_from(["shape", "eval", "--checkpoint", "/nonexistent", "--family", "ackley", "--dim", "2"]));
    assert_eq!(code, 2);
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["multiwell.toml", "ackley_d2.toml"] {
        let text = std::fs::read_to_string(dir.join(name)).unwrap();
        let cfg = parse_config(&text, Vec::new()).unwrap();
        assert!(cfg.blocks().unwrap().len() == 1, "{name}");
        cfg.train.train_config().unwrap();
    }
}
