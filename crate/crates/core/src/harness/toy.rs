//! Gaussian inpainting toy: a linear model meta-trained on square-mask
//! inpainting tasks, compared block by block against the Bayes estimator.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bayes::{bayes_affine_map, sample_prior, GaussianPrior};
use crate::bilevel::{fine_tune, maml_train_with, EpochRecord, InnerConfig, MetaState, OuterConfig};
use crate::error::{Error, Result};
use crate::models::{LinearModel, LossMode, ParamVector};
use crate::operators::{LinearOp, Task};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    #[serde(default = "d_grid")]
    pub grid: usize,
    /// `Sigma_ij = exp(-|p_i - p_j| / length_scale)`; 0 gives a diagonal covariance.
    #[serde(default = "d_length")]
    pub length_scale: f64,
    #[serde(default)]
    pub mean: f64,
    /// Side of the hidden square.
    #[serde(default = "d_square")]
    pub square: usize,
    /// Training anchors have row and column in `0..=anchor_max`.
    #[serde(default = "d_anchor_max")]
    pub anchor_max: usize,
    #[serde(default = "d_test_anchor")]
    pub test_anchor: [usize; 2],
    #[serde(default = "d_samples")]
    pub train_samples: usize,
    #[serde(default = "d_samples")]
    pub test_samples: usize,
    /// Meta-training adaptation.
    #[serde(default = "d_inner")]
    pub inner: InnerConfig,
    #[serde(default = "d_outer")]
    pub outer: OuterConfig,
    /// Adaptation to the held-out task.
    #[serde(default = "d_finetune")]
    pub finetune: InnerConfig,
}

fn d_grid() -> usize {
    8
}
fn d_length() -> f64 {
    2.0
}
fn d_square() -> usize {
    3
}
fn d_anchor_max() -> usize {
    4
}
fn d_test_anchor() -> [usize; 2] {
    [5, 5]
}
// The linear objective only sees second moments, so samples are cheap.
fn d_samples() -> usize {
    10_000
}
fn d_inner() -> InnerConfig {
    InnerConfig::adam(LossMode::Sup, 20, 1e-2, 1.0)
}
fn d_outer() -> OuterConfig {
    OuterConfig {
        track_metrics: false,
        ..OuterConfig::new(1500, 3e-3)
    }
}
fn d_finetune() -> InnerConfig {
    InnerConfig::adam(LossMode::Unsup, 20, 1e-2, 1.0)
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            grid: d_grid(),
            length_scale: d_length(),
            mean: 0.0,
            square: d_square(),
            anchor_max: d_anchor_max(),
            test_anchor: d_test_anchor(),
            train_samples: d_samples(),
            test_samples: d_samples(),
            inner: d_inner(),
            outer: d_outer(),
            finetune: d_finetune(),
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.square == 0 || self.square > self.grid {
            return Err(Error::Config("toy: need 0 < square <= grid".into()));
        }
        if self.anchor_max + self.square > self.grid {
            return Err(Error::Config("toy: training squares must fit in the grid".into()));
        }
        let [r, c] = self.test_anchor;
        if r + self.square > self.grid || c + self.square > self.grid {
            return Err(Error::Config("toy: test square must fit in the grid".into()));
        }
        if !(self.length_scale >= 0.0) {
            return Err(Error::Config("toy: length_scale must be >= 0".into()));
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(Error::Config("toy: sample counts must be positive".into()));
        }
        self.inner
            .validate()
            .map_err(|e| Error::Config(format!("toy inner: {e}")))?;
        self.outer
            .validate()
            .map_err(|e| Error::Config(format!("toy outer: {e}")))?;
        self.finetune
            .validate()
            .map_err(|e| Error::Config(format!("toy finetune: {e}")))?;
        Ok(())
    }

    fn overlaps_test(&self, r: usize, c: usize) -> bool {
        let [tr, tc] = self.test_anchor;
        let s = self.square;
        r < tr + s && tr < r + s && c < tc + s && tc < c + s
    }

    /// Training anchors in row-major order.
    pub fn train_anchors(&self) -> Vec<[usize; 2]> {
        let mut out = Vec::new();
        for r in 0..=self.anchor_max {
            for c in 0..=self.anchor_max {
                if !self.overlaps_test(r, c) {
                    out.push([r, c]);
                }
            }
        }
        out
    }

    /// Mask observing everything except the square at `anchor`.
    pub fn square_mask(&self, anchor: [usize; 2]) -> Tensor {
        let g = self.grid;
        let mut m = Tensor::full(&[g, g], 1.0);
        for i in anchor[0]..anchor[0] + self.square {
            for j in anchor[1]..anchor[1] + self.square {
                m.set2(i, j, 0.0);
            }
        }
        m
    }
}

/// Learned-vs-analytic comparison of one task's `Ker <- Im` block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockComparison {
    pub task: String,
    pub anchor: [usize; 2],
    pub cosine: f64,
    pub relative_error: f64,
    /// Same metrics over the whole `x <- y` map.
    pub full_cosine: f64,
    pub full_relative_error: f64,
    #[serde(skip)]
    pub learned: DMatrix<f64>,
    #[serde(skip)]
    pub analytic: DMatrix<f64>,
}

pub struct ToyOutcome {
    pub prior: GaussianPrior,
    pub meta: MetaState,
    pub train: Vec<BlockComparison>,
    pub test: BlockComparison,
    pub test_model: ParamVector,
}

impl ToyOutcome {
    pub fn mean_train_cosine(&self) -> f64 {
        self.train.iter().map(|b| b.cosine).sum::<f64>() / self.train.len() as f64
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.meta.history
    }
}

fn cosine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let den = a.norm() * b.norm();
    if den == 0.0 {
        return 0.0;
    }
    a.dot(b) / den
}

fn rel_err(learned: &DMatrix<f64>, analytic: &DMatrix<f64>) -> f64 {
    (learned - analytic).norm() / analytic.norm().max(f64::MIN_POSITIVE)
}

/// Rows on hidden pixels, columns on observed ones.
pub fn kernel_image_block(theta: &DMatrix<f64>, mask: &Tensor) -> DMatrix<f64> {
    let hidden: Vec<usize> = (0..mask.len()).filter(|&i| mask.data()[i] == 0.0).collect();
    let seen: Vec<usize> = (0..mask.len()).filter(|&i| mask.data()[i] != 0.0).collect();
    DMatrix::from_fn(hidden.len(), seen.len(), |i, j| theta[(hidden[i], seen[j])])
}

fn compare(
    name: &str,
    anchor: [usize; 2],
    theta: &ParamVector,
    prior: &GaussianPrior,
    op: &LinearOp,
) -> Result<BlockComparison> {
    let n = op.input_len();
    let learned_full = DMatrix::from_row_slice(n, n, theta.values());
    let (analytic_full, _) = bayes_affine_map(prior, op)?;
    let mask = op.mask_values().expect("toy tasks are masks");
    let learned = kernel_image_block(&learned_full, mask);
    let analytic = kernel_image_block(&analytic_full, mask);
    Ok(BlockComparison {
        task: name.to_string(),
        anchor,
        cosine: cosine(&learned, &analytic),
        relative_error: rel_err(&learned, &analytic),
        full_cosine: cosine(&learned_full, &analytic_full),
        full_relative_error: rel_err(&learned_full, &analytic_full),
        learned,
        analytic,
    })
}

fn flat_task(name: String, op: LinearOp, train: &[Tensor], test: &[Tensor]) -> Result<Task> {
    Task::noiseless(name, op, train, test)
}

/// A training task with the anchor of its hidden square.
pub type AnchoredTask = ([usize; 2], Task);

/// Builds the prior and the tasks; tasks use flat `[grid * grid]` signals.
pub fn toy_tasks(cfg: &ToyConfig, rng: &Rng) -> Result<(GaussianPrior, Vec<AnchoredTask>, Task)> {
    cfg.validate()?;
    let g = cfg.grid;
    let prior = GaussianPrior::exponential_grid(g, g, cfg.length_scale, cfg.mean)?;
    let make = |k: u64, anchor: [usize; 2], name: String| -> Result<Task> {
        let mut r = rng.derive(k);
        let train = sample_prior(&prior, cfg.train_samples, &mut r)?;
        let test = sample_prior(&prior, cfg.test_samples, &mut r)?;
        let mask = cfg.square_mask(anchor).reshape(&[g * g])?;
        flat_task(name, LinearOp::mask(mask)?, &train, &test)
    };
    let mut train_tasks = Vec::new();
    for (k, anchor) in cfg.train_anchors().into_iter().enumerate() {
        let name = format!("square_{}_{}", anchor[0], anchor[1]);
        train_tasks.push((anchor, make(k as u64 + 1, anchor, name)?));
    }
    let [tr, tc] = cfg.test_anchor;
    let test_task = make(0, cfg.test_anchor, format!("test_{tr}_{tc}"))?;
    Ok((prior, train_tasks, test_task))
}

/// Runs the whole toy experiment; `on_epoch` observes meta-training.
pub fn toy_experiment(
    cfg: &ToyConfig,
    rng: &Rng,
    on_epoch: impl FnMut(&MetaState) -> Result<()>,
) -> Result<ToyOutcome> {
    let (prior, train_tasks, test_task) = toy_tasks(cfg, rng)?;
    let n = cfg.grid * cfg.grid;
    let init = LinearModel::new(Tensor::zeros(&[n, n]))?.to_params();
    let tasks: Vec<Task> = train_tasks.iter().map(|(_, t)| t.clone()).collect();
    let meta = maml_train_with(
        MetaState::new(init)?,
        &tasks,
        &cfg.inner,
        &cfg.outer,
        &rng.derive(1 << 32),
        on_epoch,
    )?;

    let mut train = Vec::with_capacity(tasks.len());
    for (anchor, task) in &train_tasks {
        let (adapted, _) = crate::bilevel::inner_solve(&meta.theta_star, task, &cfg.inner)?;
        train.push(compare(&task.name, *anchor, &adapted, &prior, &task.operator)?);
    }
    let (model, _) = fine_tune(&meta.theta_star, &test_task, &cfg.finetune)?;
    let test_model = model.to_params();
    let test = compare(
        &test_task.name,
        cfg.test_anchor,
        &test_model,
        &prior,
        &test_task.operator,
    )?;
    Ok(ToyOutcome {
        prior,
        meta,
        train,
        test,
        test_model,
    })
}
