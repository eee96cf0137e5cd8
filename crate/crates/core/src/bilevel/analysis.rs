//! Diagnostics for the linear model: how far inner iterates move in the
//! directions a task cannot observe, and the curvature of the outer problem.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::models::{ParamLayout, ParamVector};
use crate::operators::{cokernel_projector, kernel_projector, LinearOp, Task};

use super::hyper::hypergradient;
use super::InnerConfig;

/// Which side of `theta - theta*` the projection acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelSide {
    /// `P_Ker(A) (theta - theta*)`: reconstructed components the measurements
    /// carry no information about. Frozen by unsupervised adaptation.
    Signal,
    /// `(theta - theta*) P_Ker(A^T)`: measurement directions no signal can
    /// produce. Frozen by supervised and unsupervised adaptation alike.
    Measurement,
}

/// Largest Frobenius norm of the projected drift over `iterates`.
pub fn kernel_drift(
    iterates: &[ParamVector],
    theta_star: &ParamVector,
    op: &LinearOp,
    side: KernelSide,
) -> Result<f64> {
    let ParamLayout::Linear { rows, cols } = *theta_star.layout() else {
        return Err(Error::invalid("kernel drift is defined for the linear model only"));
    };
    if rows != op.input_len() || cols != op.output_len() {
        return Err(Error::shape("theta does not match the operator"));
    }
    let proj = match side {
        KernelSide::Signal => kernel_projector(op)?,
        KernelSide::Measurement => cokernel_projector(op)?,
    };
    let star = DMatrix::from_row_slice(rows, cols, theta_star.values());
    let mut worst: f64 = 0.0;
    for it in iterates {
        it.ensure_compatible(theta_star)?;
        let d = DMatrix::from_row_slice(rows, cols, it.values()) - &star;
        let p = match side {
            KernelSide::Signal => &proj * d,
            KernelSide::Measurement => d * &proj,
        };
        worst = worst.max(p.norm());
    }
    Ok(worst)
}

/// Hessian of the meta objective `theta* -> sum_i L_sup(theta_i(theta*))` by
/// central differences of the exact hypergradient, symmetrized. For the
/// linear model with gradient-descent inner steps the objective is quadratic,
/// so the differences are exact up to rounding for any `h`.
pub fn outer_hessian(theta_star: &ParamVector, tasks: &[Task], cfg: &InnerConfig, h: f64) -> Result<DMatrix<f64>> {
    if !(h > 0.0) {
        return Err(Error::invalid("difference step must be positive"));
    }
    let n = theta_star.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut probe = theta_star.values().to_vec();
    for k in 0..n {
        let base = probe[k];
        probe[k] = base + h;
        let up = hypergradient(&theta_star.with_values(probe.clone())?, tasks, cfg)?;
        probe[k] = base - h;
        let down = hypergradient(&theta_star.with_values(probe.clone())?, tasks, cfg)?;
        probe[k] = base;
        for i in 0..n {
            hess[(i, k)] = (up.values()[i] - down.values()[i]) / (2.0 * h);
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}
