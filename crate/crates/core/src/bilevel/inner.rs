use crate::error::{Error, Result};
use crate::models::ParamVector;
use crate::operators::{Split, Task};

use super::adam::{adam_update, AdamState};
use super::objective::Objective;
use super::{InnerConfig, InnerOptimizer};

/// Everything an inner solve visited.
#[derive(Clone, Debug)]
pub struct InnerTrace {
    /// `phi_0 = theta*, ..., phi_T`.
    pub iterates: Vec<ParamVector>,
    /// Inner objective (data term plus proximal term) at every iterate.
    pub losses: Vec<f64>,
    /// Data term alone at every iterate.
    pub data_losses: Vec<f64>,
    /// Full gradient used at step `t`.
    pub(crate) grads: Vec<Vec<f64>>,
    /// Adam state after step `t` (empty for gradient descent).
    pub(crate) adam: Vec<AdamState>,
}

impl InnerTrace {
    pub fn steps(&self) -> usize {
        self.iterates.len() - 1
    }

    pub fn last(&self) -> &ParamVector {
        self.iterates.last().expect("trace holds theta*")
    }
}

fn prox_term(phi: &[f64], theta_star: &[f64], reg: f64) -> f64 {
    if reg == 0.0 {
        return 0.0;
    }
    0.5 * reg * phi.iter().zip(theta_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

fn add_prox_grad(grad: &mut [f64], phi: &[f64], theta_star: &[f64], reg: f64) {
    if reg != 0.0 {
        for ((g, p), t) in grad.iter_mut().zip(phi).zip(theta_star) {
            *g += reg * (p - t);
        }
    }
}

/// Runs `cfg.steps` optimizer steps from `theta*`. `on_iterate` sees every
/// iterate (including the first and last) with its data loss.
pub(crate) fn run_inner(
    obj: &Objective<'_>,
    theta_star: &ParamVector,
    cfg: &InnerConfig,
    mut on_iterate: impl FnMut(usize, &ParamVector, f64) -> Result<()>,
) -> Result<InnerTrace> {
    cfg.validate()?;
    let n = theta_star.len();
    let mut trace = InnerTrace {
        iterates: vec![theta_star.clone()],
        losses: Vec::with_capacity(cfg.steps + 1),
        data_losses: Vec::with_capacity(cfg.steps + 1),
        grads: Vec::with_capacity(cfg.steps),
        adam: Vec::new(),
    };
    let mut state = cfg.adam_state(n);
    let mut phi = theta_star.clone();
    for t in 0..=cfg.steps {
        let (data, mut grad) = obj.value_grad(&phi)?;
        let loss = data + prox_term(phi.values(), theta_star.values(), cfg.reg_lambda);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("inner loss at step {t} is {loss}")));
        }
        trace.losses.push(loss);
        trace.data_losses.push(data);
        on_iterate(t, &phi, data)?;
        if t == cfg.steps {
            break;
        }
        add_prox_grad(&mut grad, phi.values(), theta_star.values(), cfg.reg_lambda);
        let values = phi.values_mut();
        match cfg.optimizer {
            InnerOptimizer::Gd => {
                for (p, g) in values.iter_mut().zip(&grad) {
                    *p -= cfg.step_size * g;
                }
            }
            InnerOptimizer::Adam => {
                adam_update(values, &grad, &mut state, cfg.step_size);
                trace.adam.push(state.clone());
            }
        }
        if !phi.is_finite() {
            return Err(Error::NonFinite(format!(
                "inner iterate at step {} is not finite",
                t + 1
            )));
        }
        trace.grads.push(grad);
        trace.iterates.push(phi.clone());
    }
    Ok(trace)
}

/// Gradient of the inner objective over the train split.
pub fn inner_objective_grad(
    phi: &ParamVector,
    theta_star: &ParamVector,
    task: &Task,
    cfg: &InnerConfig,
) -> Result<ParamVector> {
    phi.ensure_compatible(theta_star)?;
    let obj = Objective::new(phi.layout(), task, Split::Train, cfg.mode)?;
    let (_, mut grad) = obj.value_grad(phi)?;
    add_prox_grad(&mut grad, phi.values(), theta_star.values(), cfg.reg_lambda);
    phi.with_values(grad)
}

/// Adapts `theta*` to `task` with `cfg.steps` optimizer steps.
pub fn inner_solve(theta_star: &ParamVector, task: &Task, cfg: &InnerConfig) -> Result<(ParamVector, InnerTrace)> {
    let obj = Objective::new(theta_star.layout(), task, Split::Train, cfg.mode)?;
    let trace = run_inner(&obj, theta_star, cfg, |_, _, _| Ok(()))?;
    Ok((trace.last().clone(), trace))
}
