use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelState, ParamVector};
use crate::operators::{Split, Task};
use crate::rng::Rng;

use super::adam::{adam_update, AdamState};
use super::hyper::unrolled;
use super::inner::run_inner;
use super::loss::evaluate;
use super::objective::Objective;
use super::InnerConfig;

/// Outer (meta) optimizer settings. The outer loss is always supervised.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterConfig {
    #[serde(default = "default_outer_step")]
    pub step_size: f64,
    pub epochs: usize,
    /// Tasks per outer step; 0 means all tasks.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
    /// Evaluate PSNR and the meta-model's own test loss every epoch.
    #[serde(default = "default_track")]
    pub track_metrics: bool,
}

fn default_outer_step() -> f64 {
    1e-3
}
fn default_divergence() -> f64 {
    1e12
}
fn default_track() -> bool {
    true
}

impl OuterConfig {
    pub fn new(epochs: usize, step_size: f64) -> Self {
        Self {
            step_size,
            epochs,
            batch_size: 0,
            divergence_threshold: default_divergence(),
            track_metrics: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!(
                "outer step size must be > 0, got {}",
                self.step_size
            )));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::invalid("divergence threshold must be > 0"));
        }
        Ok(())
    }
}

/// Per-task numbers of one epoch, in task-index order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    /// Inner objective after adaptation.
    pub inner_loss: f64,
    /// Supervised test loss of the adapted model.
    pub test_loss: f64,
    /// The remaining fields are only filled when metrics are tracked.
    pub test_psnr: Option<f64>,
    /// Test loss and PSNR of the meta-model before adaptation.
    pub meta_loss: Option<f64>,
    pub meta_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum over tasks of the adapted models' test losses.
    pub outer_loss: f64,
    pub tasks: Vec<TaskRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub theta_star: ParamVector,
    pub outer: AdamState,
    pub history: Vec<EpochRecord>,
}

impl MetaState {
    pub fn new(theta_star: ParamVector) -> Result<Self> {
        if !theta_star.is_finite() {
            return Err(Error::NonFinite("initial meta parameters".into()));
        }
        let outer = AdamState::new(theta_star.len());
        Ok(Self {
            theta_star,
            outer,
            history: Vec::new(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }
}

/// Inner and outer objectives of every task, built once: for the linear model
/// this caches the data moments, so an epoch costs nothing per sample.
fn task_objectives<'a>(
    tasks: &'a [Task],
    theta: &ParamVector,
    inner: &InnerConfig,
) -> Result<Vec<(Objective<'a>, Objective<'a>)>> {
    if tasks.is_empty() {
        return Err(Error::invalid("meta-training needs at least one task"));
    }
    tasks
        .iter()
        .map(|t| {
            Ok((
                Objective::new(theta.layout(), t, Split::Train, inner.mode)?,
                Objective::new(theta.layout(), t, Split::Test, crate::models::LossMode::Sup)?,
            ))
        })
        .collect()
}

/// Runs `outer.epochs` further epochs on `state`. Every epoch visits the
/// tasks in an order shuffled from `rng.derive(epoch)`, in minibatches of
/// `outer.batch_size`; each minibatch sums its tasks' hypergradients and takes
/// one outer Adam step. `on_epoch` runs after every epoch.
pub fn maml_train_with(
    mut state: MetaState,
    tasks: &[Task],
    inner: &InnerConfig,
    outer: &OuterConfig,
    rng: &Rng,
    mut on_epoch: impl FnMut(&MetaState) -> Result<()>,
) -> Result<MetaState> {
    inner.validate()?;
    outer.validate()?;
    let objectives = task_objectives(tasks, &state.theta_star, inner)?;
    let batch = if outer.batch_size == 0 {
        tasks.len()
    } else {
        outer.batch_size
    };
    let start = state.epochs_done();
    for epoch in start..start + outer.epochs {
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        rng.derive(epoch as u64).shuffle(&mut order);
        let mut records: Vec<Option<TaskRecord>> = vec![None; tasks.len()];
        for chunk in order.chunks(batch) {
            let mut grad = vec![0.0; state.theta_star.len()];
            let meta_model = ModelState::from_params(&state.theta_star)?;
            for &i in chunk {
                let meta_eval = if outer.track_metrics {
                    Some(evaluate(&meta_model, &tasks[i], Split::Test)?)
                } else {
                    None
                };
                let (inner_obj, outer_obj) = &objectives[i];
                let (test_loss, hg, trace) = unrolled(inner_obj, outer_obj, &state.theta_star, inner)?;
                let test_psnr = if outer.track_metrics {
                    let adapted = ModelState::from_params(trace.last())?;
                    Some(evaluate(&adapted, &tasks[i], Split::Test)?.psnr)
                } else {
                    None
                };
                for (g, h) in grad.iter_mut().zip(&hg) {
                    *g += h;
                }
                records[i] = Some(TaskRecord {
                    inner_loss: *trace.losses.last().expect("at least theta*"),
                    test_loss,
                    test_psnr,
                    meta_loss: meta_eval.map(|e| e.loss),
                    meta_psnr: meta_eval.map(|e| e.psnr),
                });
            }
            adam_update(state.theta_star.values_mut(), &grad, &mut state.outer, outer.step_size);
        }
        let tasks_rec: Vec<TaskRecord> = records.into_iter().map(|r| r.expect("every task visited")).collect();
        let outer_loss: f64 = tasks_rec.iter().map(|r| r.test_loss).sum();
        if !outer_loss.is_finite() || outer_loss > outer.divergence_threshold || !state.theta_star.is_finite() {
            let per_task: Vec<String> = tasks
                .iter()
                .zip(&tasks_rec)
                .map(|(t, r)| format!("{}={:.3e}", t.name, r.test_loss))
                .collect();
            return Err(Error::Divergence(format!(
                "outer loss {outer_loss:.3e} at epoch {epoch} (threshold {:.1e}); per task: {}; |theta*| = {:.3e}",
                outer.divergence_threshold,
                per_task.join(", "),
                state.theta_star.norm()
            )));
        }
        state.history.push(EpochRecord {
            epoch,
            outer_loss,
            tasks: tasks_rec,
        });
        log::debug!("epoch {epoch}: outer loss {outer_loss:.6e}");
        on_epoch(&state)?;
    }
    Ok(state)
}

/// Meta-trains from `init`; deterministic given `rng`'s seed and stream.
pub fn maml_train(
    tasks: &[Task],
    inner: &InnerConfig,
    outer: &OuterConfig,
    init: ParamVector,
    rng: &Rng,
) -> Result<MetaState> {
    maml_train_with(MetaState::new(init)?, tasks, inner, outer, rng, |_| Ok(()))
}

/// Metrics of one fine-tuning iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneStep {
    pub step: usize,
    /// Data term of the configured inner loss on the train split.
    pub loss: f64,
    /// Mean PSNR on the test split (train split if the test split is empty).
    pub psnr: f64,
}

/// Adapts the meta-model to a new task by running the inner problem from
/// `theta*`, recording loss and PSNR at every iterate.
pub fn fine_tune(theta_star: &ParamVector, task: &Task, cfg: &InnerConfig) -> Result<(ModelState, Vec<FineTuneStep>)> {
    let obj = Objective::new(theta_star.layout(), task, Split::Train, cfg.mode)?;
    let eval_split = if task.test.is_empty() {
        Split::Train
    } else {
        Split::Test
    };
    let mut steps = Vec::with_capacity(cfg.steps + 1);
    let trace = run_inner(&obj, theta_star, cfg, |t, phi, loss| {
        let model = ModelState::from_params(phi)?;
        steps.push(FineTuneStep {
            step: t,
            loss,
            psnr: evaluate(&model, task, eval_split)?.psnr,
        });
        Ok(())
    })?;
    Ok((ModelState::from_params(trace.last())?, steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilevel::{kernel_drift, KernelSide};
    use crate::models::{LinearModel, LossMode};
    use crate::operators::LinearOp;
    use crate::tensor::Tensor;

    fn mask_tasks(count: usize, seed: u64) -> Vec<Task> {
        let mut rng = Rng::new(seed, 0);
        (0..count)
            .map(|k| {
                let mask = Tensor::new(vec![6], (0..6).map(|i| f64::from((i + k) % 3 != 0)).collect()).unwrap();
                let xs: Vec<Tensor> = (0..8).map(|_| rng.normal_tensor(&[6])).collect();
                Task::noiseless(format!("m{k}"), LinearOp::mask(mask).unwrap(), &xs[..4], &xs[4..]).unwrap()
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_reduces_the_outer_loss() {
        let tasks = mask_tasks(3, 1);
        let inner = InnerConfig::gd(LossMode::Unsup, 3, 0.05, 1.0);
        let outer = OuterConfig::new(60, 0.02);
        let init = LinearModel::new(Tensor::zeros(&[6, 6])).unwrap().to_params();
        let a = maml_train(&tasks, &inner, &outer, init.clone(), &Rng::new(5, 0)).unwrap();
        let b = maml_train(&tasks, &inner, &outer, init, &Rng::new(5, 0)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.theta_star, b.theta_star);
        let first = a.history[0].outer_loss;
        let last = a.history.last().unwrap().outer_loss;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn infinite_regularization_reduces_to_supervised_training() {
        // with reg -> infinity the inner solve returns theta*, so a zero-step
        // solve is the exact limit
        let tasks = mask_tasks(1, 2);
        let inner = InnerConfig::gd(LossMode::Unsup, 0, 0.1, 1.0);
        let outer = OuterConfig::new(5, 0.01);
        let init = LinearModel::identity(6).to_params();
        let meta = maml_train(&tasks, &inner, &outer, init.clone(), &Rng::new(0, 0)).unwrap();

        let obj = Objective::new(init.layout(), &tasks[0], Split::Test, LossMode::Sup).unwrap();
        let mut theta = init.clone();
        let mut adam = AdamState::new(theta.len());
        for _ in 0..5 {
            let (_, g) = obj.value_grad(&theta).unwrap();
            adam_update(theta.values_mut(), &g, &mut adam, 0.01);
        }
        assert_eq!(meta.theta_star, theta);
    }

    #[test]
    fn divergence_is_reported() {
        let tasks = mask_tasks(2, 3);
        let inner = InnerConfig::gd(LossMode::Unsup, 1, 0.05, 1.0);
        let mut outer = OuterConfig::new(3, 1e-3);
        outer.divergence_threshold = 1e-12;
        let init = LinearModel::identity(6).to_params();
        let err = maml_train(&tasks, &inner, &outer, init, &Rng::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
    }

    #[test]
    fn zero_step_fine_tune_returns_the_meta_model() {
        let tasks = mask_tasks(1, 4);
        let star = LinearModel::new(Rng::new(1, 0).normal_tensor(&[6, 6]))
            .unwrap()
            .to_params();
        let (model, steps) = fine_tune(&star, &tasks[0], &InnerConfig::adam(LossMode::Sup, 0, 0.01, 0.0)).unwrap();
        assert_eq!(model.to_params(), star);
        assert_eq!(steps.len(), 1);
    }

    #[test]
    fn unsup_gd_fine_tune_keeps_kernel_rows() {
        let tasks = mask_tasks(1, 6);
        let star = LinearModel::new(Rng::new(2, 0).normal_tensor(&[6, 6]))
            .unwrap()
            .to_params();
        let cfg = InnerConfig::gd(LossMode::Unsup, 100, 0.05, 0.0);
        let (model, steps) = fine_tune(&star, &tasks[0], &cfg).unwrap();
        assert!(steps.last().unwrap().loss < steps[0].loss);
        let drift = kernel_drift(&[model.to_params()], &star, &tasks[0].operator, KernelSide::Signal).unwrap();
        assert!(drift <= 1e-8);
    }
}
