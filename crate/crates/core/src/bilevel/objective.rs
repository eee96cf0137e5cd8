//! Data terms of the inner and outer problems, one task and split at a time.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::models::pdnet::{sample_grad_hvp, sample_loss_grad, Residual};
use crate::models::{LossMode, ParamLayout, ParamVector, PdnetParams};
use crate::operators::{OpKind, Split, Task};

/// Linear-model data term expressed through sample moments, so that each
/// evaluation costs a few matrix products regardless of the sample count.
///
/// With `C = sum y y^T`:
/// * sup: `L = 0.5 <theta, theta C> - <theta, sum x y^T> + 0.5 sum ||x||^2`
/// * unsup: `L = 0.5 <theta, G theta C> - <theta, A^T C> + 0.5 sum ||y||^2`,
///   `G = A^T A`.
struct LinearMoments {
    rows: usize,
    cols: usize,
    gram: Gram,
    cyy: DMatrix<f64>,
    rhs: DMatrix<f64>,
    constant: f64,
}

/// `A^T A`, kept diagonal when the operator is a mask.
enum Gram {
    Identity,
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl Gram {
    fn left_mul(&self, mut m: DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Gram::Identity => m,
            Gram::Diagonal(d) => {
                for (i, &di) in d.iter().enumerate() {
                    m.row_mut(i).scale_mut(di);
                }
                m
            }
            Gram::Dense(g) => g * m,
        }
    }
}

impl LinearMoments {
    fn new(task: &Task, split: Split, mode: LossMode, rows: usize, cols: usize) -> Result<Self> {
        let op = &task.operator;
        if rows != op.input_len() || cols != op.output_len() {
            return Err(Error::shape(format!(
                "theta is {rows}x{cols} but task {} maps {} -> {}",
                task.name,
                op.input_len(),
                op.output_len()
            )));
        }
        let samples = task.split(split);
        let mut cyy = DMatrix::zeros(cols, cols);
        let mut cxy = DMatrix::zeros(rows, cols);
        let mut constant = 0.0;
        for s in samples {
            let y = s.y.to_dvector();
            cyy.ger(1.0, &y, &y, 1.0);
            if mode == LossMode::Sup {
                let x = s.x.to_dvector();
                cxy.ger(1.0, &x, &y, 1.0);
                constant += 0.5 * s.x.norm_sq();
            } else {
                constant += 0.5 * s.y.norm_sq();
            }
        }
        let (gram, rhs) = match mode {
            LossMode::Sup => (Gram::Identity, cxy),
            LossMode::Unsup => match (op.kind(), op.mask_values()) {
                (OpKind::Identity, _) => (Gram::Identity, cyy.clone()),
                (_, Some(mask)) => {
                    let gram = Gram::Diagonal(mask.data().to_vec());
                    let rhs = gram.left_mul(cyy.clone());
                    (gram, rhs)
                }
                _ => {
                    let a = op.materialize()?;
                    let at = a.transpose();
                    (Gram::Dense(&at * &a), &at * &cyy)
                }
            },
        };
        Ok(Self {
            rows,
            cols,
            gram,
            cyy,
            rhs,
            constant,
        })
    }

    fn matrix(&self, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, v)
    }

    fn flatten(&self, m: &DMatrix<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(m[(i, j)]);
            }
        }
        out
    }

    /// `v C` or `G v C`.
    fn quad(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        self.gram.left_mul(v * &self.cyy)
    }

    fn value_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let t = self.matrix(theta);
        let q = self.quad(&t);
        let loss = 0.5 * t.dot(&q) - t.dot(&self.rhs) + self.constant;
        (loss, self.flatten(&(q - &self.rhs)))
    }

    fn hvp(&self, v: &[f64]) -> Vec<f64> {
        self.flatten(&self.quad(&self.matrix(v)))
    }
}

enum Kind<'a> {
    Linear(LinearMoments),
    Pdnet {
        task: &'a Task,
        split: Split,
        mode: LossMode,
    },
}

/// `sum over a split of 0.5 ||f(y) - x||^2` or `0.5 ||A f(y) - y||^2`, as a
/// function of the flat parameters.
pub(crate) struct Objective<'a> {
    kind: Kind<'a>,
    layout: ParamLayout,
}

impl<'a> Objective<'a> {
    pub(crate) fn new(layout: &ParamLayout, task: &'a Task, split: Split, mode: LossMode) -> Result<Self> {
        if task.split(split).is_empty() {
            return Err(Error::invalid(format!(
                "task {} has an empty {split:?} split",
                task.name
            )));
        }
        let kind = match *layout {
            ParamLayout::Linear { rows, cols } => Kind::Linear(LinearMoments::new(task, split, mode, rows, cols)?),
            ParamLayout::Pdnet { .. } => {
                if task.operator.input_shape().len() != 2 {
                    return Err(Error::shape("PDNet tasks need 2-D images"));
                }
                Kind::Pdnet { task, split, mode }
            }
        };
        Ok(Self {
            kind,
            layout: layout.clone(),
        })
    }

    fn check(&self, phi: &ParamVector) -> Result<()> {
        if phi.layout() != &self.layout {
            return Err(Error::shape("parameters do not match the objective's model"));
        }
        Ok(())
    }

    pub(crate) fn value_grad(&self, phi: &ParamVector) -> Result<(f64, Vec<f64>)> {
        self.check(phi)?;
        match &self.kind {
            Kind::Linear(m) => Ok(m.value_grad(phi.values())),
            Kind::Pdnet { task, split, mode } => {
                let params = PdnetParams::from_params(phi)?;
                let mut grad = vec![0.0; phi.len()];
                let mut loss = 0.0;
                for s in task.split(*split) {
                    let residual = residual(*mode, s.x.data());
                    loss += sample_loss_grad(&params, s.y.data(), &task.operator, residual, &mut grad)?;
                }
                Ok((loss, grad))
            }
        }
    }

    /// Hessian of the data term at `phi` applied to `v`.
    pub(crate) fn hvp(&self, phi: &ParamVector, v: &[f64]) -> Result<Vec<f64>> {
        self.check(phi)?;
        if v.len() != phi.len() {
            return Err(Error::shape("direction length"));
        }
        match &self.kind {
            Kind::Linear(m) => Ok(m.hvp(v)),
            Kind::Pdnet { task, split, mode } => {
                let params = PdnetParams::from_params(phi)?;
                let mut grad = vec![0.0; phi.len()];
                let mut hv = vec![0.0; phi.len()];
                for s in task.split(*split) {
                    let residual = residual(*mode, s.x.data());
                    sample_grad_hvp(&params, v, s.y.data(), &task.operator, residual, &mut grad, &mut hv)?;
                }
                Ok(hv)
            }
        }
    }
}

fn residual(mode: LossMode, x: &[f64]) -> Residual<'_> {
    match mode {
        LossMode::Sup => Residual::Sup(x),
        LossMode::Unsup => Residual::Unsup,
    }
}
