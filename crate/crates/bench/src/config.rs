//! Run-configuration document: TOML with sections `[task]`, `[oracle]`,
//! `[methods]`, `[budget]`, `[train]`. Any key can be overridden from the
//! environment as `SHAPE_<SECTION>_<KEY>` (value parsed as a TOML value,
//! falling back to a plain string).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use shape_core::baselines::Method;
use shape_core::oracle::OracleKind;
use shape_core::policy::Policy;
use shape_core::shape_loop::ShapeConfig;
use shape_core::tasks::{Family, TaskOptions};
use shape_core::training::{TrainConfig, TrainSchedule};
use shape_numeric::Checkpoint;

use crate::harness::{BenchSpec, MethodSpec};
use crate::BenchError;

pub const SECTIONS: [&str; 5] = ["task", "oracle", "methods", "budget", "train"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// `"family:dim"` entries; when empty, every family is paired with every dim.
    pub blocks: Vec<String>,
    pub families: Vec<String>,
    pub dims: Vec<usize>,
    pub n_tasks: usize,
    pub seed: u64,
    pub wells: usize,
    pub rotation: bool,
    pub phase_noise: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            blocks: Vec::new(),
            families: vec!["ackley".into()],
            dims: vec![2],
            n_tasks: 8,
            seed: 0,
            wells: 3,
            rotation: false,
            phase_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// `exact`, `stochastic`, `zeroth_order` or `minibatch`.
    pub kind: String,
    pub sigma: f64,
    pub eps: f64,
    pub k: usize,
    pub batch: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { kind: "exact".into(), sigma: 0.1, eps: 1e-3, k: 4, batch: 8 }
    }
}

impl OracleSection {
    pub fn kind(&self) -> Result<OracleKind, BenchError> {
        Ok(match self.kind.as_str() {
            "exact" => OracleKind::Exact,
            "stochastic" | "noisy" => OracleKind::Stochastic { sigma: self.sigma },
            "zeroth_order" | "zo" => OracleKind::ZerothOrder { eps: self.eps, k: self.k },
            "minibatch" => OracleKind::Minibatch { batch: self.batch },
            other => return Err(BenchError::Config(format!("[oracle] unknown kind `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodsSection {
    /// Baseline names, or `["all"]`.
    pub baselines: Vec<String>,
    /// SHAPE checkpoint paths, relative to the config file.
    pub shape: Vec<String>,
    /// Labels for the checkpoints; defaults to `shape`, `shape_2`, ...
    pub labels: Vec<String>,
    pub early_stop: bool,
    pub event_horizon: usize,
}

impl Default for MethodsSection {
    fn default() -> Self {
        Self { baselines: vec!["all".into()], shape: Vec::new(), labels: Vec::new(), early_stop: true, event_horizon: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub calls: u64,
    pub particles: usize,
}

impl Default for BudgetSection {
    fn default() -> Self {
        Self { calls: 500, particles: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub family: String,
    pub dim: usize,
    pub wells: usize,
    pub seed: u64,
    /// Schedule-table row overrides.
    pub epochs: Option<usize>,
    pub pretrain: Option<usize>,
    pub batch: Option<usize>,
    pub hidden: Option<usize>,
    pub train_rollout: Option<u64>,
    pub memory: bool,
    pub local_controller: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            family: "multiwell".into(),
            dim: 1,
            wells: 2,
            seed: 0,
            epochs: None,
            pretrain: None,
            batch: None,
            hidden: None,
            train_rollout: None,
            memory: true,
            local_controller: true,
            checkpoint_every: 50,
        }
    }
}

impl TrainSection {
    /// Trainer configuration; disabling the local controller zeroes its
    /// pretraining and per-epoch updates, disabling memory removes the readout.
    pub fn train_config(&self) -> Result<TrainConfig, BenchError> {
        let family: Family = self.family.parse().map_err(|e| BenchError::Config(format!("[train] {e}")))?;
        let mut schedule = TrainSchedule::for_dim(self.dim);
        if let Some(v) = self.epochs {
            schedule.epochs = v;
        }
        if let Some(v) = self.pretrain {
            schedule.pretrain = v;
        }
        if let Some(v) = self.batch {
            schedule.batch = v;
        }
        if let Some(v) = self.hidden {
            schedule.hidden = v;
        }
        if let Some(v) = self.train_rollout {
            schedule.train_rollout = v;
        }
        if !self.local_controller {
            schedule.pretrain = 0;
            schedule.controller_updates = 0;
        }
        let mut cfg = TrainConfig {
            family,
            dim: self.dim,
            task: TaskOptions { wells: self.wells, ..TaskOptions::default() },
            schedule,
            seed: self.seed,
            ..TrainConfig::default()
        };
        cfg.shape.memory.enabled = self.memory;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub task: TaskSection,
    pub oracle: OracleSection,
    pub methods: MethodsSection,
    pub budget: BudgetSection,
    pub train: TrainSection,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Parses `text`, applies `SHAPE_<SECTION>_<KEY>` overrides from `env`.
pub fn parse_config(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<BenchConfig, BenchError> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| BenchError::Config(e.to_string()))?;
    for (k, v) in env {
        let Some(rest) = k.strip_prefix("SHAPE_") else { continue };
        let rest = rest.to_ascii_lowercase();
        let Some((section, key)) = rest.split_once('_') else { continue };
        if !SECTIONS.contains(&section) {
            continue;
        }
        let entry = doc.entry(section.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match entry {
            toml::Value::Table(t) => {
                t.insert(key.to_string(), parse_value(&v));
            }
            _ => return Err(BenchError::Config(format!("`{section}` is not a section"))),
        }
    }
    let cfg: BenchConfig =
        toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| BenchError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Reads a config file with overrides from the process environment.
pub fn load_config(path: &Path) -> Result<BenchConfig, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text, std::env::vars())
        .map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(cfg)
}

pub fn load_policy(path: &Path) -> Result<Policy, BenchError> {
    let ck = Checkpoint::load(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
    Ok(Policy::from_checkpoint(&ck)?)
}

impl BenchConfig {
    pub fn blocks(&self) -> Result<Vec<(Family, usize)>, BenchError> {
        let parse_family =
            |s: &str| -> Result<Family, BenchError> { s.trim().parse().map_err(|e| BenchError::Config(format!("[task] {e}"))) };
        if !self.task.blocks.is_empty() {
            return self
                .task
                .blocks
                .iter()
                .map(|b| {
                    let (f, d) = b
                        .split_once(':')
                        .ok_or_else(|| BenchError::Config(format!("[task] block `{b}` is not `family:dim`")))?;
                    let d = d.trim().parse().map_err(|_| BenchError::Config(format!("[task] bad dimension in `{b}`")))?;
                    Ok((parse_family(f)?, d))
                })
                .collect();
        }
        let mut out = Vec::new();
        for f in &self.task.families {
            for &d in &self.task.dims {
                out.push((parse_family(f)?, d));
            }
        }
        Ok(out)
    }

    pub fn baselines(&self) -> Result<Vec<Method>, BenchError> {
        if self.methods.baselines.iter().any(|b| b == "all") {
            return Ok(Method::ALL.to_vec());
        }
        self.methods
            .baselines
            .iter()
            .map(|b| b.parse::<Method>().map_err(|e| BenchError::Config(format!("[methods] {e}"))))
            .collect()
    }

    pub fn spec(&self) -> Result<BenchSpec, BenchError> {
        let mut methods = Vec::new();
        for (i, p) in self.methods.shape.iter().enumerate() {
            let policy = load_policy(&self.base_dir.join(p))?;
            let label = self.methods.labels.get(i).cloned().unwrap_or_else(|| {
                if i == 0 {
                    "shape".to_string()
                } else {
                    format!("shape_{}", i + 1)
                }
            });
            methods.push(MethodSpec::Shape { label, policy: Arc::new(policy) });
        }
        methods.extend(self.baselines()?.into_iter().map(|method| MethodSpec::Baseline { method, hparams: None }));
        if self.budget.particles == 0 || self.task.n_tasks == 0 {
            return Err(BenchError::Config("[budget] particles and [task] n_tasks must be positive".into()));
        }
        Ok(BenchSpec {
            blocks: self.blocks()?,
            n_tasks: self.task.n_tasks,
            seed: self.task.seed,
            task: TaskOptions {
                wells: self.task.wells,
                rotation: self.task.rotation,
                phase_noise: self.task.phase_noise,
                ..TaskOptions::default()
            },
            oracle: self.oracle.kind()?,
            budget: self.budget.calls,
            particles: self.budget.particles,
            methods,
            shape: ShapeConfig {
                early_stop: self.methods.early_stop,
                event_horizon: self.methods.event_horizon,
                ..ShapeConfig::default()
            },
        })
    }
}
