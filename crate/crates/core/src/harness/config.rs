//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bilevel::{InnerConfig, OuterConfig};
use crate::error::{Error, Result};
use crate::models::{LinearModel, LossMode, ParamLayout, ParamVector, PdnetParams};
use crate::rng::Rng;

use super::dataset::DatasetSpec;
use super::tasks::{default_training_tasks, TaskSpec};
use super::toy::ToyConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Toy,
    Train,
    Finetune,
    Eval,
    BayesCheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Toy => "toy",
            ExperimentKind::Train => "train",
            ExperimentKind::Finetune => "finetune",
            ExperimentKind::Eval => "eval",
            ExperimentKind::BayesCheck => "bayes-check",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFamily {
    Pdnet,
    Linear,
}

/// Reconstruction model used by train, finetune and eval runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "d_family")]
    pub family: ModelFamily,
    /// PDNet depth K.
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
}

fn d_family() -> ModelFamily {
    ModelFamily::Pdnet
}
fn d_layers() -> usize {
    10
}
fn d_channels() -> usize {
    crate::models::pdnet::DEFAULT_CHANNELS
}
fn d_tau() -> f64 {
    0.5
}
fn d_gamma() -> f64 {
    0.5
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            family: d_family(),
            layers: d_layers(),
            channels: d_channels(),
            tau: d_tau(),
            gamma: d_gamma(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.family == ModelFamily::Pdnet {
            if self.layers == 0 || self.channels == 0 {
                return Err(Error::Config("model: PDNet needs layers >= 1 and channels >= 1".into()));
            }
            if !(self.tau > 0.0 && self.gamma > 0.0) {
                return Err(Error::Config("model: tau and gamma must be positive".into()));
            }
        }
        Ok(())
    }

    /// Fresh parameters for signals of `shape` (the linear model starts at
    /// the identity on flattened signals).
    pub fn init(&self, shape: &[usize], rng: &mut Rng) -> Result<ParamVector> {
        self.validate()?;
        Ok(match self.family {
            ModelFamily::Pdnet => PdnetParams::init(self.layers, self.channels, self.tau, self.gamma, rng)?.to_params(),
            ModelFamily::Linear => {
                let n: usize = shape.iter().product();
                LinearModel::identity(n).to_params()
            }
        })
    }

    pub fn layout(&self, shape: &[usize]) -> ParamLayout {
        match self.family {
            ModelFamily::Pdnet => ParamLayout::Pdnet {
                layers: self.layers,
                channels: self.channels,
                tau: self.tau,
                gamma: self.gamma,
            },
            ModelFamily::Linear => {
                let n: usize = shape.iter().product();
                ParamLayout::Linear { rows: n, cols: n }
            }
        }
    }
}

/// Multi-task meta-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_training_tasks")]
    pub tasks: Vec<TaskSpec>,
    #[serde(default = "d_train_inner")]
    pub inner: InnerConfig,
    #[serde(default = "d_train_outer")]
    pub outer: OuterConfig,
    /// Save `checkpoints/epoch_NNNN` every this many epochs; 0 saves only the final model.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn d_train_inner() -> InnerConfig {
    InnerConfig::adam(LossMode::Sup, 1, 1e-3, 1.0)
}
fn d_train_outer() -> OuterConfig {
    OuterConfig::new(200, 1e-3)
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tasks: default_training_tasks(),
            inner: d_train_inner(),
            outer: d_train_outer(),
            checkpoint_every: 0,
        }
    }
}

/// Adaptation of a meta checkpoint to one new task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Checkpoint directory; a freshly initialized model when absent.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "d_ft_task")]
    pub task: TaskSpec,
    #[serde(default = "d_ft_inner")]
    pub inner: InnerConfig,
    /// Test reconstructions written as PNG (meta, fine-tuned and baselines).
    #[serde(default = "d_images")]
    pub images: usize,
}

fn d_ft_task() -> TaskSpec {
    TaskSpec::superres(2)
}
fn d_ft_inner() -> InnerConfig {
    InnerConfig::adam(LossMode::Unsup, 50, 1e-3, 0.0)
}
fn d_images() -> usize {
    2
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            task: d_ft_task(),
            inner: d_ft_inner(),
            images: d_images(),
        }
    }
}

/// Evaluation of a checkpoint (and the adjoint and pseudo-inverse baselines).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_training_tasks")]
    pub tasks: Vec<TaskSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            tasks: default_training_tasks(),
        }
    }
}

/// Randomized comparison of the two Bayes estimators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BayesCheckConfig {
    #[serde(default = "d_instances")]
    pub instances: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_diag")]
    pub diagonal_instances: usize,
    #[serde(default = "d_tol")]
    pub tolerance: f64,
}

fn d_instances() -> usize {
    100
}
fn d_dim() -> usize {
    16
}
fn d_diag() -> usize {
    20
}
fn d_tol() -> f64 {
    1e-8
}

impl Default for BayesCheckConfig {
    fn default() -> Self {
        Self {
            instances: d_instances(),
            dim: d_dim(),
            diagonal_instances: d_diag(),
            tolerance: d_tol(),
        }
    }
}

/// One experiment. Only the section matching `kind` (plus `model` and
/// `dataset` where relevant) is used; the others keep their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Record elapsed milliseconds in `metrics.csv`. Off by default so that
    /// replays are byte-identical.
    #[serde(default)]
    pub wall_clock: bool,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub toy: ToyConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, rename = "bayes-check")]
    pub bayes_check: BayesCheckConfig,
}

impl ExperimentConfig {
    /// Default configuration of `kind`.
    pub fn new(kind: ExperimentKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            output_dir: None,
            wall_clock: false,
            model: ModelSpec::default(),
            dataset: DatasetSpec::default(),
            toy: ToyConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            bayes_check: BayesCheckConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML config, or the `config` entry of a run's `manifest.json`.
    /// Relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let m: super::RunManifest =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            m.config
        } else {
            Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut out: Vec<&mut PathBuf> = Vec::new();
        if let Some(d) = self.output_dir.as_mut() {
            out.push(d);
        }
        if let Some(d) = self.dataset.dir.as_mut() {
            out.push(d);
        }
        if let Some(c) = self.finetune.checkpoint.as_mut() {
            out.push(c);
        }
        if let Some(c) = self.eval.checkpoint.as_mut() {
            out.push(c);
        }
        out.extend(self.finetune.task.paths_mut());
        for t in self.train.tasks.iter_mut().chain(self.eval.tasks.iter_mut()) {
            out.extend(t.paths_mut());
        }
        out
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in self.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Checks the sections used by `kind`, including that every input path exists.
    pub fn validate(&self) -> Result<()> {
        let ctx = |what: &str, e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(format!("{what}: {other}")),
        };
        let check_tasks = |tasks: &[TaskSpec]| -> Result<()> {
            if tasks.is_empty() {
                return Err(Error::Config("at least one task is required".into()));
            }
            for t in tasks {
                t.validate()?;
                for p in t.paths() {
                    if !p.is_file() {
                        return Err(Error::Config(format!("task file {} does not exist", p.display())));
                    }
                }
            }
            Ok(())
        };
        let check_ckpt = |c: &Option<PathBuf>| -> Result<()> {
            match c {
                Some(p) if !p.join("model.json").is_file() => {
                    Err(Error::Config(format!("checkpoint {} has no model.json", p.display())))
                }
                _ => Ok(()),
            }
        };
        match self.kind {
            ExperimentKind::Toy => self.toy.validate(),
            ExperimentKind::Train => {
                self.model.validate()?;
                self.dataset.validate()?;
                check_tasks(&self.train.tasks)?;
                self.train.inner.validate().map_err(|e| ctx("train.inner", e))?;
                self.train.outer.validate().map_err(|e| ctx("train.outer", e))
            }
            ExperimentKind::Finetune => {
                self.model.validate()?;
                self.dataset.validate()?;
                check_tasks(std::slice::from_ref(&self.finetune.task))?;
                check_ckpt(&self.finetune.checkpoint)?;
                self.finetune.inner.validate().map_err(|e| ctx("finetune.inner", e))
            }
            ExperimentKind::Eval => {
                self.model.validate()?;
                self.dataset.validate()?;
                check_tasks(&self.eval.tasks)?;
                if self.eval.checkpoint.is_none() {
                    return Err(Error::Config("eval needs eval.checkpoint".into()));
                }
                check_ckpt(&self.eval.checkpoint)
            }
            ExperimentKind::BayesCheck => {
                let b = &self.bayes_check;
                if b.dim == 0 || b.instances == 0 {
                    return Err(Error::Config("bayes-check: dim and instances must be positive".into()));
                }
                if !(b.tolerance > 0.0) {
                    return Err(Error::Config("bayes-check: tolerance must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("configs always serialize");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Short stable id used in `metrics.csv`.
    pub fn experiment_id(&self) -> String {
        format!("{}-{}", self.kind.name(), &self.hash()[..12])
    }
}
