use crate::error::{Error, Result};
use crate::models::{LossMode, ParamVector};
use crate::operators::{Split, Task};

use super::adam::adam_reverse;
use super::inner::{run_inner, InnerTrace};
use super::objective::Objective;
use super::{InnerConfig, InnerOptimizer};

/// Longest inner solve that is differentiated through.
pub const MAX_TAPED_STEPS: usize = 50;

/// Hypergradient contribution of one task.
#[derive(Clone, Debug)]
pub struct TaskHypergradient {
    pub grad: ParamVector,
    /// Supervised test-split loss of the adapted model.
    pub outer_loss: f64,
    pub inner: InnerTrace,
}

/// Reverse pass through the inner trajectory.
///
/// With `g_t = grad L(phi_t) + reg (phi_t - theta*)` and `H_t` the Hessian of
/// the data term at `phi_t`, a gradient step gives
/// `phi_bar_t = phi_bar_{t+1} + (H_t + reg) g_bar` with `g_bar = -step phi_bar_{t+1}`,
/// while every step sends `-reg g_bar` to `theta*`. Adam additionally carries
/// adjoints of its two moment vectors.
pub(crate) fn unrolled(
    inner_obj: &Objective<'_>,
    outer_obj: &Objective<'_>,
    theta_star: &ParamVector,
    cfg: &InnerConfig,
) -> Result<(f64, Vec<f64>, InnerTrace)> {
    if cfg.steps > MAX_TAPED_STEPS {
        return Err(Error::invalid(format!(
            "cannot differentiate through {} inner steps (limit {MAX_TAPED_STEPS})",
            cfg.steps
        )));
    }
    let trace = run_inner(inner_obj, theta_star, cfg, |_, _, _| Ok(()))?;
    let (outer_loss, mut phi_bar) = outer_obj.value_grad(trace.last())?;
    let n = phi_bar.len();
    let mut star_bar = vec![0.0; n];
    let mut m_bar = vec![0.0; n];
    let mut v_bar = vec![0.0; n];
    for t in (0..trace.steps()).rev() {
        let g_bar: Vec<f64> = match cfg.optimizer {
            InnerOptimizer::Gd => phi_bar.iter().map(|p| -cfg.step_size * p).collect(),
            InnerOptimizer::Adam => adam_reverse(
                &trace.grads[t],
                &trace.adam[t],
                cfg.step_size,
                &phi_bar,
                &mut m_bar,
                &mut v_bar,
            ),
        };
        let hg = inner_obj.hvp(&trace.iterates[t], &g_bar)?;
        for i in 0..n {
            phi_bar[i] += hg[i] + cfg.reg_lambda * g_bar[i];
            star_bar[i] -= cfg.reg_lambda * g_bar[i];
        }
    }
    for (s, p) in star_bar.iter_mut().zip(&phi_bar) {
        *s += p;
    }
    Ok((outer_loss, star_bar, trace))
}

/// Gradient with respect to `theta*` of the supervised test loss of the
/// model adapted to `task`.
pub fn task_hypergradient(theta_star: &ParamVector, task: &Task, cfg: &InnerConfig) -> Result<TaskHypergradient> {
    let inner_obj = Objective::new(theta_star.layout(), task, Split::Train, cfg.mode)?;
    let outer_obj = Objective::new(theta_star.layout(), task, Split::Test, LossMode::Sup)?;
    let (outer_loss, grad, inner) = unrolled(&inner_obj, &outer_obj, theta_star, cfg)?;
    Ok(TaskHypergradient {
        grad: theta_star.with_values(grad)?,
        outer_loss,
        inner,
    })
}

/// `d/dtheta* sum_i L_sup(f_{theta_i(theta*)}, T_i, test)`, summed in task order.
pub fn hypergradient(theta_star: &ParamVector, tasks: &[Task], cfg: &InnerConfig) -> Result<ParamVector> {
    if tasks.is_empty() {
        return Err(Error::invalid("hypergradient needs at least one task"));
    }
    let mut total = vec![0.0; theta_star.len()];
    for task in tasks {
        let h = task_hypergradient(theta_star, task, cfg)?;
        for (t, g) in total.iter_mut().zip(h.grad.values()) {
            *t += g;
        }
    }
    theta_star.with_values(total)
}
