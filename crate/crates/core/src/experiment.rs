//! Named experiments: resolved configuration, overrides, seed sweeps and
//! their CSV outputs.
//!
//! A configuration is a TOML document with the sections `run`, `model`,
//! `optimizer`, `loss`, `data` and `schedule`. Every named experiment has a
//! complete default document (see [`ExperimentConfig::named`]); overrides
//! address a single key as `section.key=value`.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationSpec, Harmonic, Primitive, SchemeName};
use crate::data::{
    make_helmholtz, make_regression_task, make_toy_classification, sample_collocation, sha256_hex, HelmholtzCase,
    ToyKind, ToySpec,
};
use crate::error::{KronError, Result};
use crate::network::{init_model, InitScheme, KnnModel, WeightInit};
use crate::training::{
    train, write_predictions, Budget, Evaluation, LossKind, LossSpec, OptimizerKind, OptimizerSpec, PinnData,
    RunRecord, Schedule, TrainData, TrainJob, Transition, TransitionMode,
};

/// Every name accepted by [`ExperimentConfig::named`].
pub const EXPERIMENTS: &[&str] = &[
    "discontinuous",
    "highfreq-1",
    "highfreq-100",
    "highfreq-200",
    "helmholtz",
    "helmholtz-hf",
    "helmholtz-transfer",
    "two-moons",
    "two-circles",
    "knn-variants",
];

/// Environment variable capping the number of concurrent runs.
pub const THREADS_ENV: &str = "KRONNET_THREADS";

/// Version tag written into every CSV produced here.
pub const CSV_SCHEMA: &str = "kronnet-csv v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    /// Record wall-clock time. Off, every time column is written as 0 and
    /// repeated runs give byte-identical files.
    pub timing: bool,
    /// Metric snapshot interval in iterations; 0 records only the final one.
    pub eval_every: usize,
    /// Loss level for the iterations-to-threshold column.
    pub loss_threshold: f64,
    /// Also write model predictions on the evaluation grid.
    pub predictions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub base: String,
    pub n: f64,
    pub harmonic: String,
    /// `xavier-normal` or `normal` (then `init_std` applies).
    pub init: String,
    pub init_std: f64,
    /// Schemes trained side by side: `fixed`, `llaaf`, `rowdy<K>`, `knn1..3`.
    pub schemes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    /// `gd`, `sgd-momentum` or `adam`.
    pub kind: String,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// 0 trains on the full set every iteration.
    pub batch_size: usize,
    /// Used when `epochs` is 0.
    pub iterations: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    /// `square`, `bce` or `pinn`.
    pub kind: String,
    pub residual_weight: f64,
    pub boundary_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `discontinuous`, `highfreq-<m>`, `helmholtz`, `helmholtz-hf`,
    /// `two-moons` or `two-circles`.
    pub task: String,
    pub n_residual: usize,
    pub n_boundary: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// Scheme every run switches to at `switch_at`; `none` disables.
    pub switch_to: String,
    pub switch_at: usize,
    /// `freeze` keeps the trained harmonics, `zero` removes them.
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub loss: LossSection,
    pub data: DataSection,
    pub schedule: ScheduleSection,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl ExperimentConfig {
    /// Defaults for a named experiment.
    pub fn named(name: &str) -> Result<Self> {
        let regression = |task: &str, hidden: Vec<usize>, lr: f64, iterations: usize, schemes: &[&str]| ExperimentConfig {
            run: RunSection {
                experiment: name.to_string(),
                seeds: vec![0],
                out_dir: "runs".into(),
                timing: true,
                eval_every: 1000,
                loss_threshold: 1e-4,
                predictions: true,
            },
            model: ModelSection {
                hidden,
                base: "cos".into(),
                n: 10.0,
                harmonic: "sin".into(),
                init: "xavier-normal".into(),
                init_std: 0.0,
                schemes: strings(schemes),
            },
            optimizer: OptimizerSection {
                kind: "adam".into(),
                lr,
                momentum: 0.0,
                weight_decay: 0.0,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                batch_size: 0,
                iterations,
                epochs: 0,
            },
            loss: LossSection {
                kind: "square".into(),
                residual_weight: 1.0,
                boundary_weight: 1.0,
            },
            data: DataSection {
                task: task.to_string(),
                n_residual: 0,
                n_boundary: 0,
                n_train: 0,
                n_test: 0,
                noise: 0.0,
            },
            schedule: ScheduleSection {
                switch_to: "none".into(),
                switch_at: 0,
                mode: "freeze".into(),
            },
        };
        let helmholtz = |task: &str, hidden: Vec<usize>, lr: f64, iterations: usize, n_res: usize, n_bnd: usize| {
            let mut c = regression(task, hidden, lr, iterations, &["fixed", "llaaf", "rowdy5"]);
            c.run.seeds = vec![0, 1, 2, 3, 4];
            c.run.eval_every = 500;
            c.run.loss_threshold = 1.0;
            c.model.base = "tanh".into();
            c.loss.kind = "pinn".into();
            c.data.n_residual = n_res;
            c.data.n_boundary = n_bnd;
            c
        };
        let toy = |task: &str| {
            let mut c = regression(task, vec![400, 400, 400], 1e-3, 0, &["fixed", "llaaf", "rowdy4", "rowdy8"]);
            c.run.seeds = vec![0, 1, 2];
            c.run.eval_every = 0;
            c.run.loss_threshold = 0.1;
            c.run.predictions = false;
            c.model.base = "relu".into();
            c.model.n = 1.0;
            c.model.init = "normal".into();
            c.model.init_std = 1.0 / 400f64.sqrt();
            c.optimizer.kind = "sgd-momentum".into();
            c.optimizer.momentum = 0.8;
            c.optimizer.weight_decay = 1e-4;
            c.optimizer.batch_size = 64;
            c.optimizer.epochs = 200;
            c.loss.kind = "bce".into();
            c.data.n_train = 1000;
            c.data.n_test = 1000;
            c.data.noise = task
                .parse::<ToyKind>()
                .map(ToyKind::default_noise)
                .unwrap_or(0.0);
            c
        };
        Ok(match name {
            "discontinuous" => regression(
                "discontinuous",
                vec![40],
                8e-6,
                50_000,
                &["fixed", "llaaf", "rowdy3", "rowdy6", "rowdy9"],
            ),
            "knn-variants" => regression(
                "discontinuous",
                vec![40],
                8e-6,
                50_000,
                &["rowdy9", "knn1", "knn2", "knn3"],
            ),
            "highfreq-1" | "highfreq-100" | "highfreq-200" => {
                let mut c = regression(name, vec![50, 50, 50], 4e-6, 20_000, &["fixed", "llaaf", "rowdy9"]);
                c.run.loss_threshold = 1e-3;
                c
            }
            "helmholtz" => helmholtz("helmholtz", vec![30, 30, 30], 8e-3, 30_000, 6000, 300),
            "helmholtz-hf" => helmholtz("helmholtz-hf", vec![60, 60, 60], 9e-5, 20_000, 10_000, 400),
            "helmholtz-transfer" => {
                let mut c = helmholtz("helmholtz", vec![30, 30, 30], 8e-3, 30_000, 6000, 300);
                c.model.schemes = strings(&["rowdy5", "llaaf"]);
                c.schedule.switch_to = "llaaf".into();
                c.schedule.switch_at = 1000;
                c
            }
            "two-moons" => toy("two-moons"),
            "two-circles" => toy("two-circles"),
            _ => {
                return Err(KronError::UnknownName {
                    kind: "experiment",
                    name: name.to_string(),
                })
            }
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| KronError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| KronError::Config(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Applies one `section.key=value` override. Values are read as TOML
    /// when possible and as bare strings otherwise; a comma list fills an
    /// array field.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| KronError::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| KronError::Config(format!("override key `{key}` must be section.key")))?;
        let mut doc = toml::Value::try_from(&*self).map_err(|e| KronError::Config(e.to_string()))?;
        let slot = doc
            .get_mut(section)
            .and_then(|s| s.get_mut(field))
            .ok_or_else(|| KronError::Config(format!("unknown config key `{key}`")))?;
        *slot = coerce(raw, slot).ok_or_else(|| KronError::Config(format!("cannot read `{raw}` as a value for `{key}`")))?;
        let cfg: ExperimentConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| KronError::Config(format!("`{key}`: {e}")))?;
        cfg.resolve()?;
        *self = cfg;
        Ok(())
    }

    /// Checks every field and turns the text fields into typed values.
    pub fn resolve(&self) -> Result<Resolved> {
        let bad = |what: &str, v: &str| KronError::Config(format!("invalid {what} `{v}`"));
        let schemes = self
            .model
            .schemes
            .iter()
            .map(|s| s.parse::<SchemeName>().map_err(|_| bad("scheme", s)))
            .collect::<Result<Vec<_>>>()?;
        if schemes.is_empty() {
            return Err(KronError::Config("model.schemes is empty".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(KronError::Config("run.seeds is empty".into()));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(KronError::Config("model.hidden needs positive widths".into()));
        }
        let base: Primitive = self.model.base.parse().map_err(|_| bad("activation", &self.model.base))?;
        let harmonic = match self.model.harmonic.as_str() {
            "sin" => Harmonic::Sin,
            "cos" => Harmonic::Cos,
            h => return Err(bad("harmonic", h)),
        };
        let init = match self.model.init.as_str() {
            "xavier-normal" => WeightInit::XavierNormal,
            "normal" if self.model.init_std > 0.0 => WeightInit::Normal {
                std: self.model.init_std,
            },
            i => return Err(bad("init (normal needs init_std > 0)", i)),
        };
        let kind = match self.optimizer.kind.as_str() {
            "gd" => OptimizerKind::Gd,
            "sgd-momentum" => OptimizerKind::SgdMomentum,
            "adam" => OptimizerKind::Adam,
            k => return Err(bad("optimizer", k)),
        };
        if self.optimizer.lr.is_nan() || self.optimizer.lr < 0.0 {
            return Err(bad("learning rate", &self.optimizer.lr.to_string()));
        }
        let budget = if self.optimizer.epochs > 0 {
            Budget::Epochs(self.optimizer.epochs)
        } else {
            Budget::Iterations(self.optimizer.iterations)
        };
        let optimizer = OptimizerSpec {
            kind,
            lr: self.optimizer.lr,
            momentum: self.optimizer.momentum,
            weight_decay: self.optimizer.weight_decay,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps: self.optimizer.eps,
            batch_size: (self.optimizer.batch_size > 0).then_some(self.optimizer.batch_size),
            budget,
        };
        let loss_kind = match self.loss.kind.as_str() {
            "square" => LossKind::Square,
            "bce" => LossKind::Bce,
            "pinn" => LossKind::Pinn,
            k => return Err(bad("loss", k)),
        };
        let loss = LossSpec {
            kind: loss_kind,
            residual_weight: self.loss.residual_weight,
            boundary_weight: self.loss.boundary_weight,
        };
        let task = Task::parse(&self.data.task).ok_or_else(|| bad("data task", &self.data.task))?;
        let expected = match task {
            Task::Regression(_) => LossKind::Square,
            Task::Helmholtz(_) => LossKind::Pinn,
            Task::Toy(_) => LossKind::Bce,
        };
        if loss_kind != expected {
            return Err(KronError::Config(format!(
                "loss `{}` does not fit data task `{}`",
                self.loss.kind, self.data.task
            )));
        }
        let mode = match self.schedule.mode.as_str() {
            "freeze" => TransitionMode::Freeze,
            "zero" => TransitionMode::Zero,
            m => return Err(bad("transition mode", m)),
        };
        let transitions = match self.schedule.switch_to.as_str() {
            "none" => Vec::new(),
            s => vec![Transition {
                at: self.schedule.switch_at,
                to: s.parse().map_err(|_| bad("scheme", s))?,
            }],
        };
        Ok(Resolved {
            schemes,
            base,
            harmonic,
            init,
            optimizer,
            loss,
            task,
            schedule: Schedule { transitions, mode },
        })
    }
}

/// Reads `raw` as a value of the same TOML type as `current`.
fn coerce(raw: &str, current: &toml::Value) -> Option<toml::Value> {
    use toml::Value;
    let parsed = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"));
    match (current, parsed) {
        (Value::Float(_), Some(Value::Integer(i))) => Some(Value::Float(i as f64)),
        (Value::String(_), Some(Value::String(s))) => Some(Value::String(s)),
        (Value::String(_), _) => Some(Value::String(raw.to_string())),
        (Value::Array(items), parsed) => match parsed {
            Some(Value::Array(a)) => Some(Value::Array(a)),
            _ => {
                let proto = items.first().cloned().unwrap_or(Value::Integer(0));
                raw.split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(|p| coerce(p.trim(), &proto))
                    .collect::<Option<Vec<_>>>()
                    .map(Value::Array)
            }
        },
        (_, Some(v)) => Some(v),
        (_, None) => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    /// Name as understood by [`make_regression_task`].
    Regression(String),
    Helmholtz(HelmholtzCase),
    Toy(ToyKind),
}

impl Task {
    fn parse(s: &str) -> Option<Task> {
        match s {
            "helmholtz" => Some(Task::Helmholtz(HelmholtzCase::Base)),
            "helmholtz-hf" => Some(Task::Helmholtz(HelmholtzCase::HighFreq)),
            _ => {
                if let Ok(kind) = ToyKind::from_str(s) {
                    return Some(Task::Toy(kind));
                }
                make_regression_task(s).ok().map(|_| Task::Regression(s.to_string()))
            }
        }
    }
}

/// Typed view of a validated configuration.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub schemes: Vec<SchemeName>,
    pub base: Primitive,
    pub harmonic: Harmonic,
    pub init: WeightInit,
    pub optimizer: OptimizerSpec,
    pub loss: LossSpec,
    pub task: Task,
    pub schedule: Schedule,
}

impl Resolved {
    pub fn activation(&self, cfg: &ExperimentConfig, scheme: SchemeName) -> ActivationSpec {
        let mut spec = ActivationSpec::new(scheme, self.base, cfg.model.n);
        spec.harmonic = self.harmonic;
        spec
    }
}

/// Training data, evaluation and prediction grid for one seed.
pub struct Prepared {
    pub data: TrainData,
    pub eval: Evaluation,
    pub grid: Option<Array2<f64>>,
    pub input_dim: usize,
}

/// Builds the data of `task` for `seed`; regression points are the same for
/// every seed.
pub fn prepare(cfg: &ExperimentConfig, task: &Task, seed: u64) -> Result<Prepared> {
    Ok(match task {
        Task::Regression(name) => {
            let t = make_regression_task(name)?;
            let (x, y) = t.train_arrays();
            let (gx, exact) = t.eval_grid();
            Prepared {
                data: TrainData::Regression { x, y },
                eval: Evaluation::RelL2 { x: gx.clone(), exact },
                grid: Some(gx),
                input_dim: 1,
            }
        }
        Task::Helmholtz(case) => {
            let p = make_helmholtz(*case);
            let c = sample_collocation(cfg.data.n_residual, cfg.data.n_boundary, seed)?;
            let (gx, exact) = p.eval_grid();
            Prepared {
                data: TrainData::Pinn(PinnData::new(p, c.interior, c.boundary)),
                eval: Evaluation::RelL2 { x: gx.clone(), exact },
                grid: Some(gx),
                input_dim: 2,
            }
        }
        Task::Toy(kind) => {
            let set = make_toy_classification(ToySpec {
                kind: *kind,
                n_train: cfg.data.n_train,
                n_test: cfg.data.n_test,
                noise: cfg.data.noise,
                seed,
            })?;
            let labels = set.train.labels.clone().insert_axis(ndarray::Axis(1));
            Prepared {
                data: TrainData::Classification {
                    x: set.train.x,
                    labels: Arc::new(labels),
                },
                eval: Evaluation::Accuracy {
                    x: set.test.x,
                    labels: set.test.labels,
                },
                grid: None,
                input_dim: 2,
            }
        }
    })
}

/// One trained `(scheme, seed)` pair.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub scheme: SchemeName,
    pub seed: u64,
    pub record: RunRecord,
    pub model: KnnModel,
}

/// Output file of one run, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub scheme: String,
    pub seed: u64,
    pub history: String,
    pub predictions: Option<String>,
}

/// Everything needed to reproduce a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub csv_schema: String,
    pub runs: Vec<RunFile>,
    pub summary: String,
    /// Choices the configuration does not spell out.
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let r = cfg.resolve()?;
        let mut runs = Vec::new();
        for s in &r.schemes {
            for &seed in &cfg.run.seeds {
                runs.push(RunFile {
                    scheme: s.to_string(),
                    seed,
                    history: format!("{s}_seed{seed}.csv"),
                    predictions: (cfg.run.predictions && !matches!(r.task, Task::Toy(_)))
                        .then(|| format!("{s}_seed{seed}_pred.csv")),
                });
            }
        }
        let mut notes = vec![
            "adam defaults beta1=0.9 beta2=0.999 eps=1e-8 unless overridden".to_string(),
            "weight decay is decoupled and applies to W and b only".to_string(),
        ];
        if matches!(r.task, Task::Regression(_)) && r.optimizer.kind == OptimizerKind::Adam {
            notes.push("regression tasks use Adam; the optimizer is an assumption".into());
        }
        if !cfg.run.timing {
            notes.push("timing off: wall-clock columns are written as 0".into());
        }
        Ok(RunManifest {
            config: cfg.clone(),
            seeds: cfg.run.seeds.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            csv_schema: CSV_SCHEMA.to_string(),
            runs,
            summary: "summary.csv".into(),
            notes,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub manifest: RunManifest,
    pub runs: Vec<RunResult>,
    pub out_dir: PathBuf,
}

impl ExperimentOutcome {
    pub fn runs_of(&self, scheme: SchemeName) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.scheme == scheme)
    }

    /// First run that stopped on a non-finite loss.
    pub fn first_nonfinite(&self) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.record.nonfinite_at.is_some())
    }
}

/// Number of concurrent runs: `KRONNET_THREADS` if set, else rayon's default.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(KronError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(rayon::current_num_threads()),
    }
}

/// Runs `f` on a rayon pool sized by [`thread_count`].
pub fn in_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| KronError::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Trains every scheme for every seed and writes the per-run histories,
/// predictions, `summary.csv`, `manifest.json` and `config.toml` into
/// `cfg.run.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let r = cfg.resolve()?;
    let manifest = RunManifest::new(cfg)?;
    let hash = manifest.sha256()?;
    let out_dir = PathBuf::from(&cfg.run.out_dir);
    std::fs::create_dir_all(&out_dir)?;

    let jobs: Vec<(SchemeName, u64)> = r
        .schemes
        .iter()
        .flat_map(|&s| cfg.run.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let runs = in_pool(|| {
        jobs.par_iter()
            .map(|&(scheme, seed)| train_one(cfg, &r, scheme, seed))
            .collect::<Result<Vec<_>>>()
    })??;

    for (run, file) in runs.iter().zip(&manifest.runs) {
        let comments = run_comments(&hash, cfg, run);
        run.record
            .write_csv(&out_dir.join(&file.history), &comments, cfg.run.timing)?;
        if let Some(pred) = &file.predictions {
            let seed_data = prepare(cfg, &r.task, run.seed)?;
            if let Some(grid) = &seed_data.grid {
                write_predictions(&out_dir.join(pred), &comments, &run.model, grid)?;
            }
        }
    }
    write_summary(&out_dir.join(&manifest.summary), &hash, cfg, &runs)?;
    std::fs::write(out_dir.join("manifest.json"), manifest.to_json()?)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(ExperimentOutcome {
        manifest,
        runs,
        out_dir,
    })
}

/// Trains one `(scheme, seed)` pair without writing anything.
pub fn train_one(cfg: &ExperimentConfig, r: &Resolved, scheme: SchemeName, seed: u64) -> Result<RunResult> {
    let prepared = prepare(cfg, &r.task, seed)?;
    let activation = r.activation(cfg, scheme);
    let mut widths = vec![prepared.input_dim];
    widths.extend(&cfg.model.hidden);
    widths.push(1);
    let model = init_model(&widths, &activation, &InitScheme::Practice(r.init), seed)?;
    let job = TrainJob {
        activation,
        data: &prepared.data,
        optimizer: r.optimizer,
        loss: r.loss,
        schedule: r.schedule.clone(),
        eval: Some(&prepared.eval),
        eval_every: cfg.run.eval_every,
        seed,
    };
    let (model, record) = train(model, &job)?;
    Ok(RunResult {
        scheme,
        seed,
        record,
        model,
    })
}

fn run_comments(hash: &str, cfg: &ExperimentConfig, run: &RunResult) -> Vec<String> {
    vec![
        CSV_SCHEMA.to_string(),
        format!("manifest sha256 {hash}"),
        format!("experiment {} scheme {} seed {}", cfg.run.experiment, run.scheme, run.seed),
    ]
}

/// One row per run and one `mean` row per scheme. The normalized time is
/// the wall time over the mean wall time of the `fixed` scheme.
fn write_summary(path: &Path, hash: &str, cfg: &ExperimentConfig, runs: &[RunResult]) -> Result<()> {
    let fixed_ms = mean(runs.iter().filter(|r| r.scheme == SchemeName::Fixed).map(|r| r.record.wall_ms));
    let norm = |ms: f64| match (cfg.run.timing, fixed_ms) {
        (true, Some(f)) if f > 0.0 => format!("{}", ms / f),
        _ => String::new(),
    };
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = Vec::new();
    out.extend_from_slice(format!("# {CSV_SCHEMA}\n# manifest sha256 {hash}\n").as_bytes());
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record([
            "scheme",
            "seed",
            "final_loss",
            "final_metric",
            "final_epoch_loss",
            "iterations_to_threshold",
            "nonfinite_at",
            "normalized_time",
        ])?;
        let threshold = cfg.run.loss_threshold;
        let mut schemes: Vec<SchemeName> = Vec::new();
        for run in runs {
            if !schemes.contains(&run.scheme) {
                schemes.push(run.scheme);
            }
            let rec = &run.record;
            w.write_record([
                run.scheme.to_string(),
                run.seed.to_string(),
                rec.final_loss.to_string(),
                opt(rec.final_metric),
                opt(rec.epoch_losses.last().copied()),
                rec.iterations_to(threshold).map(|i| i.to_string()).unwrap_or_default(),
                rec.nonfinite_at.map(|i| i.to_string()).unwrap_or_default(),
                norm(rec.wall_ms),
            ])?;
        }
        for s in schemes {
            let of: Vec<&RunRecord> = runs.iter().filter(|r| r.scheme == s).map(|r| &r.record).collect();
            let its: Vec<f64> = of.iter().filter_map(|r| r.iterations_to(threshold)).map(|i| i as f64).collect();
            w.write_record([
                s.to_string(),
                "mean".to_string(),
                opt(mean(of.iter().map(|r| r.final_loss))),
                opt(mean(of.iter().filter_map(|r| r.final_metric))),
                opt(mean(of.iter().filter_map(|r| r.epoch_losses.last().copied()))),
                // Only when every seed reached the threshold.
                if its.len() == of.len() {
                    opt(mean(its.into_iter()))
                } else {
                    String::new()
                },
                String::new(),
                mean(of.iter().map(|r| r.wall_ms)).map(norm).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}
