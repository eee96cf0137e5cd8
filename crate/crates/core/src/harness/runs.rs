//! Experiment drivers. Each writes `config.toml`, `metrics.csv`,
//! `report.json` and `manifest.json` into the output directory.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bayes::{bayes_estimate, gaussian_condition_oracle, sample_prior, GaussianPrior};
use crate::bilevel::{evaluate, fine_tune, maml_train_with, unsup_loss, MetaState, PSNR_PEAK};
use crate::error::{Error, Result};
use crate::models::{LossMode, ModelState, ParamVector};
use crate::npy::write_npy;
use crate::numerics::psnr;
use crate::operators::{pinv_apply, LinearOp, Split, Task};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::checkpoint::{ensure_layout, load_checkpoint, save_checkpoint};
use super::config::{ExperimentConfig, ExperimentKind};
use super::dataset::{load_dataset, write_gray, Dataset};
use super::metrics::MetricsWriter;
use super::tasks::TaskSpec;
use super::toy::{toy_experiment, BlockComparison};

// Fixed sub-streams of the experiment seed.
const STREAM_DATA: u64 = 1;
const STREAM_TASKS: u64 = 2;
const STREAM_MODEL: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_TOY: u64 = 5;
const STREAM_BAYES: u64 = 6;

/// Everything needed to replay a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub config_hash: String,
    pub crate_version: String,
    pub checkpoint_layout_version: u32,
    pub metrics_rows: usize,
    /// Files written, relative to the output directory, sorted.
    pub outputs: Vec<String>,
    pub config: ExperimentConfig,
}

/// Outcome of [`run`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub experiment_id: String,
    pub output_dir: PathBuf,
    pub metrics_rows: usize,
    pub report: serde_json::Value,
}

struct RunContext {
    cfg: ExperimentConfig,
    out: PathBuf,
    rng: Rng,
    metrics: MetricsWriter,
    experiment_id: String,
}

impl RunContext {
    fn new(cfg: &ExperimentConfig, out: &Path, kind: ExperimentKind) -> Result<Self> {
        if cfg.kind != kind {
            return Err(Error::Config(format!(
                "config is for {:?}, not {}",
                cfg.kind.name(),
                kind.name()
            )));
        }
        cfg.validate()?;
        create_dir(out)?;
        let experiment_id = cfg.experiment_id();
        std::fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(|source| Error::File {
            path: out.join("config.toml"),
            source,
        })?;
        Ok(Self {
            cfg: cfg.clone(),
            out: out.to_path_buf(),
            rng: Rng::new(cfg.seed, 0),
            metrics: MetricsWriter::create(&out.join("metrics.csv"), &experiment_id, cfg.wall_clock)?,
            experiment_id,
        })
    }

    fn finish(self, report: &impl Serialize) -> Result<RunSummary> {
        let report = serde_json::to_value(report)?;
        write_json(&self.out.join("report.json"), &report)?;
        let rows = self.metrics.finish()?;
        let mut outputs = list_files(&self.out)?;
        outputs.push("manifest.json".into());
        outputs.sort();
        outputs.dedup();
        let manifest = RunManifest {
            experiment_id: self.experiment_id.clone(),
            kind: self.cfg.kind,
            seed: self.cfg.seed,
            config_hash: self.cfg.hash(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_layout_version: super::checkpoint::LAYOUT_VERSION,
            metrics_rows: rows,
            outputs,
            config: self.cfg,
        };
        write_json(&self.out.join("manifest.json"), &manifest)?;
        Ok(RunSummary {
            experiment_id: self.experiment_id,
            output_dir: self.out,
            metrics_rows: rows,
            report,
        })
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::File {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn list_files(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(rel) = p.strip_prefix(root) {
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
    }
    Ok(out)
}

/// Runs `cfg.kind` writing into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    match cfg.kind {
        ExperimentKind::Toy => run_toy(cfg, out),
        ExperimentKind::Train => run_train(cfg, out),
        ExperimentKind::Finetune => run_finetune(cfg, out),
        ExperimentKind::Eval => run_eval(cfg, out),
        ExperimentKind::BayesCheck => run_bayes_check(cfg, out),
    }
}

fn matrix_tensor(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_matrix(m)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyReport {
    pub train: Vec<BlockComparison>,
    pub test: BlockComparison,
    pub mean_train_cosine: f64,
    pub min_train_cosine: f64,
    pub initial_outer_loss: f64,
    pub final_outer_loss: f64,
}

/// Gaussian inpainting toy; dumps learned and analytic blocks as NPY.
pub fn run_toy(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let mut ctx = RunContext::new(cfg, out, ExperimentKind::Toy)?;
    let toy = &cfg.toy;
    let metrics = &mut ctx.metrics;
    let outcome = toy_experiment(toy, &ctx.rng.derive(STREAM_TOY), |s: &MetaState| {
        let rec = s.history.last().expect("called after an epoch");
        metrics.push("meta", rec.epoch, "outer_sup", rec.outer_loss, None)
    })?;

    let blocks = out.join("blocks");
    create_dir(&blocks)?;
    for b in outcome.train.iter().chain(std::iter::once(&outcome.test)) {
        write_npy(
            &blocks.join(format!("{}_learned.npy", b.task)),
            &matrix_tensor(&b.learned),
        )?;
        write_npy(
            &blocks.join(format!("{}_analytic.npy", b.task)),
            &matrix_tensor(&b.analytic),
        )?;
        ctx.metrics.push(&b.task, 0, "block_cosine", b.cosine, None)?;
        ctx.metrics
            .push(&b.task, 0, "block_rel_error", b.relative_error, None)?;
    }
    let n = toy.grid * toy.grid;
    write_npy(
        &out.join("theta_star.npy"),
        &outcome.meta.theta_star.as_tensor().reshape(&[n, n])?,
    )?;
    write_npy(
        &out.join("theta_test.npy"),
        &outcome.test_model.as_tensor().reshape(&[n, n])?,
    )?;
    write_npy(
        &out.join("prior_mean.npy"),
        &Tensor::from_slice(outcome.prior.mean().as_slice()),
    )?;
    write_npy(&out.join("prior_cov.npy"), &matrix_tensor(outcome.prior.covariance()))?;
    let mut r = ctx.rng.derive(STREAM_DATA);
    let sample = sample_prior(&outcome.prior, 1, &mut r)?.remove(0);
    write_npy(&out.join("sample.npy"), &sample.reshape(&[toy.grid, toy.grid])?)?;

    let history = outcome.history();
    let report = ToyReport {
        mean_train_cosine: outcome.mean_train_cosine(),
        min_train_cosine: outcome.train.iter().map(|b| b.cosine).fold(f64::INFINITY, f64::min),
        initial_outer_loss: history.first().map_or(f64::NAN, |h| h.outer_loss),
        final_outer_loss: history.last().map_or(f64::NAN, |h| h.outer_loss),
        train: outcome.train.clone(),
        test: outcome.test.clone(),
    };
    ctx.finish(&report)
}

/// Builds one task per spec from a shared dataset; duplicate labels get an index suffix.
fn build_tasks(specs: &[TaskSpec], data: &Dataset, rng: &Rng) -> Result<Vec<Task>> {
    let mut tasks = Vec::with_capacity(specs.len());
    for (k, spec) in specs.iter().enumerate() {
        let mut r = rng.derive(k as u64);
        tasks.push(spec.build(&data.train, &data.test, &mut r)?);
    }
    let names: Vec<String> = tasks.iter().map(|t| t.name.clone()).collect();
    for (k, t) in tasks.iter_mut().enumerate() {
        if names.iter().filter(|n| **n == t.name).count() > 1 {
            t.name = format!("{}_{k}", t.name);
        }
    }
    Ok(tasks)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub meta_psnr: f64,
    pub inner_psnr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_outer_loss: f64,
    pub tasks: Vec<TaskScore>,
}

/// Multi-task PDNet (or linear) meta-training. Per-epoch metrics are always
/// tracked here, whatever `train.outer.track_metrics` says, since the
/// metrics file needs them.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let mut ctx = RunContext::new(cfg, out, ExperimentKind::Train)?;
    let data = load_dataset(&cfg.dataset, &mut ctx.rng.derive(STREAM_DATA))?;
    let tasks = build_tasks(&cfg.train.tasks, &data, &ctx.rng.derive(STREAM_TASKS))?;
    let init = cfg
        .model
        .init(tasks[0].image_shape(), &mut ctx.rng.derive(STREAM_MODEL))?;
    let mut outer = cfg.train.outer.clone();
    outer.track_metrics = true;

    let ckpt_every = cfg.train.checkpoint_every;
    let metrics = &mut ctx.metrics;
    let meta = maml_train_with(
        MetaState::new(init)?,
        &tasks,
        &cfg.train.inner,
        &outer,
        &ctx.rng.derive(STREAM_TRAIN),
        |s| {
            let rec = s.history.last().expect("called after an epoch");
            for (task, r) in tasks.iter().zip(&rec.tasks) {
                metrics.push(
                    &task.name,
                    rec.epoch,
                    "meta",
                    r.meta_loss.unwrap_or(f64::NAN),
                    r.meta_psnr,
                )?;
                metrics.push(&task.name, rec.epoch, "inner", r.test_loss, r.test_psnr)?;
            }
            if ckpt_every > 0 && (rec.epoch + 1) % ckpt_every == 0 {
                save_checkpoint(
                    &out.join("checkpoints").join(format!("epoch_{:04}", rec.epoch + 1)),
                    &s.theta_star,
                )?;
            }
            Ok(())
        },
    )?;
    save_checkpoint(&out.join("checkpoint"), &meta.theta_star)?;

    let last = meta.history.last();
    let report = TrainReport {
        epochs: meta.history.len(),
        final_outer_loss: last.map_or(f64::NAN, |h| h.outer_loss),
        tasks: tasks
            .iter()
            .enumerate()
            .map(|(k, t)| TaskScore {
                task: t.name.clone(),
                meta_psnr: last.and_then(|h| h.tasks[k].meta_psnr).unwrap_or(f64::NAN),
                inner_psnr: last.and_then(|h| h.tasks[k].test_psnr).unwrap_or(f64::NAN),
            })
            .collect(),
    };
    ctx.finish(&report)
}

/// Supervised loss and mean PSNR of a fixed reconstruction rule on the test split.
fn baseline(task: &Task, f: impl Fn(&LinearOp, &Tensor) -> Result<Tensor>) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut total = 0.0;
    for s in &task.test {
        let r = f(&task.operator, &s.y)?;
        loss += 0.5 * r.sub(&s.x).norm_sq();
        total += psnr(&r, &s.x, PSNR_PEAK)?;
    }
    Ok((loss, total / task.test.len() as f64))
}

fn adjoint(op: &LinearOp, y: &Tensor) -> Result<Tensor> {
    op.adjoint(y)
}

fn load_model(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    shape: &[usize],
    rng: &mut Rng,
) -> Result<ParamVector> {
    match checkpoint {
        Some(dir) => {
            let p = load_checkpoint(dir)?;
            ensure_layout(&p, &cfg.model.layout(shape))?;
            Ok(p)
        }
        None => cfg.model.init(shape, rng),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub task: String,
    pub mode: LossMode,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_psnr: f64,
    pub final_psnr: f64,
    pub adjoint_psnr: f64,
    pub pinv_psnr: f64,
}

/// Fine-tunes a checkpoint on one task and compares against the adjoint
/// and pseudo-inverse reconstructions.
pub fn run_finetune(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let mut ctx = RunContext::new(cfg, out, ExperimentKind::Finetune)?;
    let ft = &cfg.finetune;
    let data = load_dataset(&cfg.dataset, &mut ctx.rng.derive(STREAM_DATA))?;
    let task = build_tasks(std::slice::from_ref(&ft.task), &data, &ctx.rng.derive(STREAM_TASKS))?.remove(0);
    let meta = load_model(
        cfg,
        ft.checkpoint.as_deref(),
        task.image_shape(),
        &mut ctx.rng.derive(STREAM_MODEL),
    )?;

    let (adj_loss, adj_psnr) = baseline(&task, adjoint)?;
    let (pinv_loss, pinv_psnr) = baseline(&task, pinv_apply)?;
    ctx.metrics.push(&task.name, 0, "adjoint", adj_loss, Some(adj_psnr))?;
    ctx.metrics.push(&task.name, 0, "pinv", pinv_loss, Some(pinv_psnr))?;

    let (model, trace) = fine_tune(&meta, &task, &ft.inner)?;
    let kind = match ft.inner.mode {
        LossMode::Sup => "sup",
        LossMode::Unsup => "unsup",
    };
    for s in &trace {
        ctx.metrics.push(&task.name, s.step, kind, s.loss, Some(s.psnr))?;
    }
    save_checkpoint(&out.join("checkpoint"), &model.to_params())?;

    let meta_model = ModelState::from_params(&meta)?;
    let images = out.join("images");
    create_dir(&images)?;
    for (k, s) in task.test.iter().take(ft.images).enumerate() {
        if s.x.shape().len() != 2 {
            break;
        }
        let save = |name: &str, x: &Tensor| write_gray(&images.join(format!("{k:02}_{name}.png")), x);
        save("truth", &s.x)?;
        save("adjoint", &task.operator.adjoint(&s.y)?)?;
        save("pinv", &pinv_apply(&task.operator, &s.y)?)?;
        save("meta", &meta_model.reconstruct(&s.y, &task.operator)?)?;
        save("finetuned", &model.reconstruct(&s.y, &task.operator)?)?;
    }

    let first = trace.first().expect("trace holds step 0");
    let last = trace.last().expect("trace holds step 0");
    let report = FinetuneReport {
        task: task.name.clone(),
        mode: ft.inner.mode,
        steps: ft.inner.steps,
        initial_loss: first.loss,
        final_loss: last.loss,
        initial_psnr: first.psnr,
        final_psnr: last.psnr,
        adjoint_psnr: adj_psnr,
        pinv_psnr,
    };
    ctx.finish(&report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalScore {
    pub task: String,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub psnr: f64,
    pub adjoint_psnr: f64,
    pub pinv_psnr: f64,
}

/// Test-split metrics of a checkpoint on every configured task.
pub fn run_eval(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let mut ctx = RunContext::new(cfg, out, ExperimentKind::Eval)?;
    let data = load_dataset(&cfg.dataset, &mut ctx.rng.derive(STREAM_DATA))?;
    let tasks = build_tasks(&cfg.eval.tasks, &data, &ctx.rng.derive(STREAM_TASKS))?;
    let params = load_model(
        cfg,
        cfg.eval.checkpoint.as_deref(),
        tasks[0].image_shape(),
        &mut ctx.rng.derive(STREAM_MODEL),
    )?;
    let model = ModelState::from_params(&params)?;
    let mut scores = Vec::new();
    for t in &tasks {
        let e = evaluate(&model, t, Split::Test)?;
        let u = unsup_loss(&model, t, Split::Test)?;
        let (adj_loss, adj_psnr) = baseline(t, adjoint)?;
        let (pinv_loss, pinv_psnr) = baseline(t, pinv_apply)?;
        ctx.metrics.push(&t.name, 0, "sup", e.loss, Some(e.psnr))?;
        ctx.metrics.push(&t.name, 0, "unsup", u, None)?;
        ctx.metrics.push(&t.name, 0, "adjoint", adj_loss, Some(adj_psnr))?;
        ctx.metrics.push(&t.name, 0, "pinv", pinv_loss, Some(pinv_psnr))?;
        scores.push(EvalScore {
            task: t.name.clone(),
            sup_loss: e.loss,
            unsup_loss: u,
            psnr: e.psnr,
            adjoint_psnr: adj_psnr,
            pinv_psnr,
        });
    }
    ctx.finish(&scores)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BayesCheckReport {
    pub instances: usize,
    pub max_relative_error: f64,
    pub identity_max_relative_error: f64,
    /// Largest `|x_hat_i - mu_i|` over hidden coordinates with diagonal covariances.
    pub diagonal_max_kernel_gap: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn random_prior(n: usize, rng: &mut Rng) -> Result<GaussianPrior> {
    let mu = DVector::from_fn(n, |_, _| rng.normal());
    let b = DMatrix::from_fn(n, n, |_, _| rng.normal());
    let sigma = &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1;
    GaussianPrior::new(mu, sigma)
}

fn random_keep_mask(n: usize, rng: &mut Rng) -> Tensor {
    let mut data: Vec<f64> = (0..n).map(|_| f64::from(rng.bernoulli(0.5))).collect();
    let pick = rng.below(n);
    data[pick] = 1.0;
    Tensor::from_slice(&data)
}

fn rel_gap(a: &Tensor, b: &Tensor) -> f64 {
    crate::tensor::distance(a, b) / b.norm().max(f64::MIN_POSITIVE)
}

/// Compares the subspace-assembled Bayes estimate with direct Gaussian
/// conditioning on random priors and mask or decimation operators.
pub fn run_bayes_check(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let mut ctx = RunContext::new(cfg, out, ExperimentKind::BayesCheck)?;
    let bc = &cfg.bayes_check;
    let n = bc.dim;
    let root = ctx.rng.derive(STREAM_BAYES);
    let mut worst: f64 = 0.0;
    for k in 0..bc.instances {
        let mut r = root.derive(k as u64);
        let prior = random_prior(n, &mut r)?;
        let op = if k % 2 == 1 && n.is_multiple_of(2) {
            LinearOp::decimation(&[n], 2)?
        } else {
            LinearOp::mask(random_keep_mask(n, &mut r))?
        };
        let x = sample_prior(&prior, 1, &mut r)?.remove(0);
        let y = op.apply(&x)?;
        let err = rel_gap(
            &bayes_estimate(&prior, &op, &y)?,
            &gaussian_condition_oracle(&prior, &op, &y)?,
        );
        ctx.metrics
            .push(&format!("instance_{k:03}"), k, "rel_error", err, None)?;
        worst = worst.max(err);
    }

    let mut ident_worst: f64 = 0.0;
    let mut diag_worst: f64 = 0.0;
    let op_id = LinearOp::identity(&[n]);
    for k in 0..bc.diagonal_instances {
        let mut r = root.derive((bc.instances + k) as u64);
        let prior = random_prior(n, &mut r)?;
        let x = sample_prior(&prior, 1, &mut r)?.remove(0);
        let err = rel_gap(
            &bayes_estimate(&prior, &op_id, &x)?,
            &gaussian_condition_oracle(&prior, &op_id, &x)?,
        );
        ctx.metrics
            .push(&format!("identity_{k:03}"), k, "rel_error", err, None)?;
        ident_worst = ident_worst.max(err);

        let variances = DVector::from_fn(n, |_, _| r.uniform_range(0.1, 2.0));
        let diag = GaussianPrior::new(prior.mean().clone(), DMatrix::from_diagonal(&variances))?;
        let mask = random_keep_mask(n, &mut r);
        let op = LinearOp::mask(mask.clone())?;
        let x = sample_prior(&diag, 1, &mut r)?.remove(0);
        let est = bayes_estimate(&diag, &op, &op.apply(&x)?)?;
        let gap = (0..n)
            .filter(|&i| mask.data()[i] == 0.0)
            .map(|i| (est.data()[i] - diag.mean()[i]).abs())
            .fold(0.0, f64::max);
        ctx.metrics
            .push(&format!("diagonal_{k:03}"), k, "kernel_gap", gap, None)?;
        diag_worst = diag_worst.max(gap);
    }

    let passed = worst <= bc.tolerance && ident_worst <= bc.tolerance && diag_worst <= 1e-12;
    let report = BayesCheckReport {
        instances: bc.instances,
        max_relative_error: worst,
        identity_max_relative_error: ident_worst,
        diagonal_max_kernel_gap: diag_worst,
        tolerance: bc.tolerance,
        passed,
    };
    let summary = ctx.finish(&report)?;
    if !passed {
        return Err(Error::CheckFailed(format!(
            "Bayes estimators disagree: max relative error {worst:.3e} (identity {ident_worst:.3e}), diagonal kernel gap {diag_worst:.3e}"
        )));
    }
    Ok(summary)
}
