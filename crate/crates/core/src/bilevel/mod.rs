//! Bilevel meta-learning.
//!
//! The meta-model `theta*` is trained so that a few optimizer steps on each
//! task's inner objective
//!
//! ```text
//! L_inner(f_phi, train split) + reg/2 ||phi - theta*||^2,   phi_0 = theta*
//! ```
//!
//! produce a model with low supervised loss on the task's test split.
//! Hypergradients are obtained by reverse-mode differentiation through the
//! unrolled inner steps (moments included for Adam).

mod adam;
mod analysis;
mod hyper;
mod inner;
mod loss;
mod objective;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::LossMode;

pub use adam::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
pub use analysis::{kernel_drift, outer_hessian, KernelSide};
pub use hyper::{hypergradient, task_hypergradient, TaskHypergradient, MAX_TAPED_STEPS};
pub use inner::{inner_objective_grad, inner_solve, InnerTrace};
pub use loss::{evaluate, sup_loss, unsup_loss, Evaluation, PSNR_PEAK};
pub use train::{
    fine_tune, maml_train, maml_train_with, EpochRecord, FineTuneStep, MetaState, OuterConfig, TaskRecord,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerOptimizer {
    Gd,
    Adam,
}

/// How each task adapts the meta-model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerConfig {
    pub mode: LossMode,
    pub steps: usize,
    pub optimizer: InnerOptimizer,
    pub step_size: f64,
    #[serde(default = "default_reg")]
    pub reg_lambda: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_reg() -> f64 {
    1.0
}
fn default_beta1() -> f64 {
    DEFAULT_BETA1
}
fn default_beta2() -> f64 {
    DEFAULT_BETA2
}
fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl InnerConfig {
    pub fn gd(mode: LossMode, steps: usize, step_size: f64, reg_lambda: f64) -> Self {
        Self {
            mode,
            steps,
            optimizer: InnerOptimizer::Gd,
            step_size,
            reg_lambda,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }

    pub fn adam(mode: LossMode, steps: usize, step_size: f64, reg_lambda: f64) -> Self {
        Self {
            optimizer: InnerOptimizer::Adam,
            ..Self::gd(mode, steps, step_size, reg_lambda)
        }
    }

    /// `steps = 0` is allowed and means "no adaptation".
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!(
                "inner step size must be > 0, got {}",
                self.step_size
            )));
        }
        if !(self.reg_lambda >= 0.0 && self.reg_lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "reg_lambda must be >= 0, got {}",
                self.reg_lambda
            )));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("Adam epsilon must be > 0"));
        }
        Ok(())
    }

    pub(crate) fn adam_state(&self, len: usize) -> AdamState {
        AdamState::with_hyper(len, self.beta1, self.beta2, self.eps)
    }
}
