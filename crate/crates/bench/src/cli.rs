//! `shape` command line: train, eval, bench, plot, diag.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use shape_core::shape_loop::ShapeConfig;
use shape_core::tasks::{Family, TaskOptions};
use shape_core::training::Trainer;

use crate::config::{load_config, load_policy, BenchConfig, OracleSection, TrainSection};
use crate::harness::{mean_curves, run_benchmark, BenchSpec, MethodSpec};
use crate::plot::render_blocks;
use crate::report::BenchReport;
use crate::table::{read_curves, write_curves, write_losses, write_rows};
use crate::{diag, BenchError};

#[derive(Debug, Parser)]
#[command(name = "shape", version, about = "Fixed-budget nonconvex optimization with a learned port-Hamiltonian navigator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a planner/controller pair and write a checkpoint plus loss curves.
    Train(TrainArgs),
    /// Evaluate a checkpoint on fresh tasks of one family.
    Eval(EvalArgs),
    /// Run a matched-budget benchmark from a config document.
    Bench(BenchArgs),
    /// Render best-so-far plots from a curves CSV written by `bench`.
    Plot(PlotArgs),
    /// Run the energy/Lyapunov diagnostic suites.
    Diag(DiagArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config document; its [train] section supplies defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pretrain: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train without external memory (readout length 0).
    #[arg(long)]
    pub no_memory: bool,
    /// Skip all local-controller updates.
    #[arg(long)]
    pub no_controller: bool,
    #[arg(long, default_value = "shape-train")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub family: String,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 500)]
    pub budget: u64,
    #[arg(long, default_value_t = 32)]
    pub tasks: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// exact, stochastic, zeroth_order or minibatch.
    #[arg(long, default_value = "exact")]
    pub oracle: String,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 3)]
    pub wells: usize,
    /// Metrics CSV destination.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    pub config: PathBuf,
    #[arg(long, default_value = "shape-bench")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// `curves.csv` from a bench run.
    pub rows: PathBuf,
    #[arg(long, default_value = "plots")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// CSV of fitted constants.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>, BenchError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn train(args: &TrainArgs) -> Result<(), BenchError> {
    let mut section = match &args.config {
        Some(p) => load_config(p)?.train,
        None => TrainSection::default(),
    };
    if let Some(f) = &args.family {
        section.family = f.clone();
    }
    if let Some(d) = args.dim {
        section.dim = d;
    }
    section.epochs = args.epochs.or(section.epochs);
    section.pretrain = args.pretrain.or(section.pretrain);
    section.batch = args.batch.or(section.batch);
    section.hidden = args.hidden.or(section.hidden);
    section.seed = args.seed.unwrap_or(section.seed);
    section.memory &= !args.no_memory;
    section.local_controller &= !args.no_controller;
    let cfg = section.train_config()?;
    fs::create_dir_all(&args.out)?;
    let every = section.checkpoint_every.max(1);
    let out = args.out.clone();
    let mut trainer = Trainer::new(cfg)?;
    let mut save_err = None;
    trainer.train(&mut |epoch, tr| {
        let last = tr.log.last().map_or(f64::NAN, |r| r.parts.total);
        eprintln!("epoch {epoch}: loss {last:.6}");
        if epoch % every == 0 {
            if let Err(e) = tr.policy.to_checkpoint().save(&out.join(format!("policy_e{epoch:04}.ckpt"))) {
                save_err = Some(e);
            }
        }
    })?;
    if let Some(e) = save_err {
        return Err(BenchError::Config(format!("checkpoint write failed: {e}")));
    }
    trainer
        .policy
        .to_checkpoint()
        .save(&args.out.join("policy.ckpt"))
        .map_err(|e| BenchError::Config(format!("checkpoint write failed: {e}")))?;
    write_losses(create(&args.out.join("loss.csv"))?, &trainer.log)?;
    println!("wrote {}", args.out.join("policy.ckpt").display());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<(), BenchError> {
    let family: Family = args.family.parse().map_err(|e| BenchError::Config(format!("{e}")))?;
    let policy = load_policy(&args.checkpoint)?;
    let oracle = OracleSection { kind: args.oracle.clone(), sigma: args.sigma, ..OracleSection::default() }.kind()?;
    let spec = BenchSpec {
        blocks: vec![(family, args.dim)],
        n_tasks: args.tasks,
        seed: args.seed,
        task: TaskOptions { wells: args.wells, ..TaskOptions::default() },
        oracle,
        budget: args.budget,
        particles: 1,
        methods: vec![MethodSpec::Shape { label: "shape".into(), policy: Arc::new(policy) }],
        shape: ShapeConfig::default(),
    };
    let out = run_benchmark(&spec)?;
    if let Some(p) = &args.out {
        write_rows(create(p)?, &out.rows)?;
    }
    print!("{}", BenchReport::from_rows(&out.rows).to_markdown());
    Ok(())
}

pub fn bench(cfg: &BenchConfig, out_dir: &Path) -> Result<BenchReport, BenchError> {
    let spec = cfg.spec()?;
    let out = run_benchmark(&spec)?;
    fs::create_dir_all(out_dir)?;
    write_rows(create(&out_dir.join("rows.csv"))?, &out.rows)?;
    let curves = mean_curves(&out.curves);
    write_curves(create(&out_dir.join("curves.csv"))?, &out.grid, &curves)?;
    let report = BenchReport::from_rows(&out.rows);
    create(&out_dir.join("report.md"))?.write_all(report.to_markdown().as_bytes())?;
    for (stem, svg) in render_blocks(&out.grid, &curves) {
        create(&out_dir.join("plots").join(format!("{stem}.svg")))?.write_all(svg.as_bytes())?;
    }
    Ok(report)
}

pub fn plot(args: &PlotArgs) -> Result<(), BenchError> {
    let (grid, curves) = read_curves(BufReader::new(File::open(&args.rows)?))?;
    for (stem, svg) in render_blocks(&grid, &curves) {
        let path = args.out.join(format!("{stem}.svg"));
        create(&path)?.write_all(svg.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Prints the pass/fail table; a failing suite is a numerical failure.
pub fn diag(args: &DiagArgs) -> Result<bool, BenchError> {
    let results = diag::all(args.samples)?;
    println!("| suite | result | detail |\n|---|---|---|");
    for r in &results {
        println!("| {} | {} | {} |", r.name, if r.pass { "PASS" } else { "FAIL" }, r.detail);
    }
    if let Some(p) = &args.out {
        let mut w = csv::Writer::from_writer(create(p)?);
        w.write_record(["suite", "item", "key", "value"])?;
        for r in &results {
            for (item, key, v) in &r.constants {
                w.write_record([r.name, item, key, &crate::table::fmt_real(*v)])?;
            }
        }
        w.flush()?;
    }
    Ok(results.iter().all(|r| r.pass))
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => load_config(&a.config).and_then(|cfg| {
            let report = bench(&cfg, &a.out)?;
            print!("{}", report.to_markdown());
            Ok(())
        }),
        Command::Plot(a) => plot(a),
        Command::Diag(a) => match diag(a) {
            Ok(true) => Ok(()),
            Ok(false) => return 3,
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
