use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Moment estimates and step counter of an Adam optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_hyper(len, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    pub fn with_hyper(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub(crate) fn bias(&self) -> (f64, f64) {
        let t = self.t as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }
}

/// One bias-corrected Adam update:
///
/// ```text
/// m <- b1 m + (1 - b1) g        v <- b2 v + (1 - b2) g^2
/// p <- p - step * m_hat / (sqrt(v_hat) + eps)
/// ```
///
/// Coordinates whose gradient has always been zero do not move.
pub fn adam_step(params: &[f64], grad: &[f64], state: &AdamState, step_size: f64) -> Result<(Vec<f64>, AdamState)> {
    if params.len() != grad.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam: {} parameters, {} gradients, state of {}",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    let mut next = state.clone();
    let mut out = params.to_vec();
    adam_update(&mut out, grad, &mut next, step_size);
    Ok((out, next))
}

pub(crate) fn adam_update(params: &mut [f64], grad: &[f64], state: &mut AdamState, step_size: f64) {
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let (c1, c2) = state.bias();
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= step_size * m_hat / (v_hat.sqrt() + state.eps);
    }
}

/// Reverse of one [`adam_update`].
///
/// `state` is the optimizer state *after* the step, `grad` the gradient
/// that was used. On entry `p_bar`, `m_bar`, `v_bar` hold the adjoints of the
/// updated parameters and moments; on exit `m_bar`, `v_bar` hold the adjoints
/// of the moments before the step and the return value is the adjoint of
/// `grad`. The parameter adjoint passes through unchanged.
pub(crate) fn adam_reverse(
    grad: &[f64],
    state: &AdamState,
    step_size: f64,
    p_bar: &[f64],
    m_bar: &mut [f64],
    v_bar: &mut [f64],
) -> Vec<f64> {
    let (b1, b2) = (state.beta1, state.beta2);
    let (c1, c2) = state.bias();
    let mut g_bar = vec![0.0; grad.len()];
    for i in 0..grad.len() {
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let root = v_hat.sqrt();
        let denom = root + state.eps;
        let dp_dm = -step_size / (c1 * denom);
        let dp_dv = if root > 0.0 {
            step_size * m_hat / (denom * denom) / (2.0 * root * c2)
        } else {
            0.0
        };
        let m_tot = m_bar[i] + p_bar[i] * dp_dm;
        let v_tot = v_bar[i] + p_bar[i] * dp_dv;
        g_bar[i] = (1.0 - b1) * m_tot + 2.0 * (1.0 - b2) * grad[i] * v_tot;
        m_bar[i] = b1 * m_tot;
        v_bar[i] = b2 * v_tot;
    }
    g_bar
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let p = vec![1.0, -2.0];
        let (q, s) = adam_step(&p, &[0.0, 0.0], &AdamState::new(2), 0.1).unwrap();
        assert_eq!(q, p);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_has_unit_scale() {
        let (q, _) = adam_step(&[0.0, 0.0], &[3.0, -0.5], &AdamState::new(2), 0.1).unwrap();
        assert!((q[0] + 0.1 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((q[1] - 0.1 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [1.5, -0.7, 3.0];
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(a, b)| a - b).collect();
            adam_update(&mut p, &g, &mut s, 0.1);
        }
        for (a, b) in p.iter().zip(&target) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn reverse_matches_finite_differences() {
        // one Adam step as a function of (m, v, g) with fixed p_bar
        let state0 = AdamState {
            m: vec![0.3, -0.1],
            v: vec![0.2, 0.05],
            t: 3,
            ..AdamState::new(2)
        };
        let g = vec![0.7, -1.2];
        let p_bar = vec![0.4, -0.9];
        let f = |m: &[f64], v: &[f64], g: &[f64]| -> f64 {
            let mut s = state0.clone();
            s.m = m.to_vec();
            s.v = v.to_vec();
            let mut p = vec![0.0, 0.0];
            adam_update(&mut p, g, &mut s, 0.05);
            p.iter().zip(&p_bar).map(|(a, b)| a * b).sum()
        };
        let mut after = state0.clone();
        adam_update(&mut [0.0, 0.0], &g, &mut after, 0.05);
        let mut m_bar = vec![0.0; 2];
        let mut v_bar = vec![0.0; 2];
        let g_bar = adam_reverse(&g, &after, 0.05, &p_bar, &mut m_bar, &mut v_bar);
        let h = 1e-6;
        for i in 0..2 {
            let bump = |x: &[f64], s: f64| {
                let mut y = x.to_vec();
                y[i] += s;
                y
            };
            let fd_g = (f(&state0.m, &state0.v, &bump(&g, h)) - f(&state0.m, &state0.v, &bump(&g, -h))) / (2.0 * h);
            let fd_m = (f(&bump(&state0.m, h), &state0.v, &g) - f(&bump(&state0.m, -h), &state0.v, &g)) / (2.0 * h);
            let fd_v = (f(&state0.m, &bump(&state0.v, h), &g) - f(&state0.m, &bump(&state0.v, -h), &g)) / (2.0 * h);
            assert!((fd_g - g_bar[i]).abs() < 1e-7, "g {fd_g} {}", g_bar[i]);
            assert!((fd_m - m_bar[i]).abs() < 1e-7, "m {fd_m} {}", m_bar[i]);
            assert!((fd_v - v_bar[i]).abs() < 1e-7, "v {fd_v} {}", v_bar[i]);
        }
    }
}
