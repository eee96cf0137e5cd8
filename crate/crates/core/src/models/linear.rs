use crate::error::{Error, Result};
use crate::operators::LinearOp;
use crate::tensor::Tensor;

use super::params::{ParamLayout, ParamVector};
use super::LossMode;

/// `f(y) = theta y` with `theta` of shape `[dim(x), dim(y)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub theta: Tensor,
}

impl LinearModel {
    pub fn new(theta: Tensor) -> Result<Self> {
        if theta.shape().len() != 2 {
            return Err(Error::shape("theta must be a matrix"));
        }
        Ok(Self { theta })
    }

    pub fn identity(n: usize) -> Self {
        let mut theta = Tensor::zeros(&[n, n]);
        for i in 0..n {
            theta.set2(i, i, 1.0);
        }
        Self { theta }
    }

    pub fn rows(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.theta.shape()[1]
    }

    pub fn to_params(&self) -> ParamVector {
        ParamVector::new(
            ParamLayout::Linear {
                rows: self.rows(),
                cols: self.cols(),
            },
            self.theta.data().to_vec(),
        )
        .expect("layout built from the matrix shape")
    }

    pub fn from_params(p: &ParamVector) -> Result<Self> {
        match *p.layout() {
            ParamLayout::Linear { rows, cols } => Ok(Self {
                theta: Tensor::new(vec![rows, cols], p.values().to_vec())?,
            }),
            _ => Err(Error::shape("not a linear-model parameter vector")),
        }
    }

    /// Checks that the model maps `op`'s measurements into its signal space.
    pub fn ensure_fits(&self, op: &LinearOp) -> Result<()> {
        if self.rows() != op.input_len() || self.cols() != op.output_len() {
            return Err(Error::shape(format!(
                "theta is {}x{} but the operator maps {} -> {}",
                self.rows(),
                self.cols(),
                op.input_len(),
                op.output_len()
            )));
        }
        Ok(())
    }
}

fn matvec(theta: &Tensor, y: &[f64]) -> Vec<f64> {
    let cols = theta.shape()[1];
    theta
        .data()
        .chunks(cols)
        .map(|row| row.iter().zip(y).map(|(a, b)| a * b).sum())
        .collect()
}

/// `theta y`, returned flat with shape `[rows]`.
pub fn linear_forward(model: &LinearModel, y: &Tensor) -> Result<Tensor> {
    if y.len() != model.cols() {
        return Err(Error::shape(format!(
            "measurement has {} entries, theta has {} columns",
            y.len(),
            model.cols()
        )));
    }
    Ok(Tensor::from_slice(&matvec(&model.theta, y.data())))
}

/// Gradient with respect to `theta` of one pair's inner objective
///
/// * unsupervised: `0.5 ||A theta y - y||^2 + reg/2 ||theta - theta*||^2`
///   giving `A^T (A theta y - y) y^T + reg (theta - theta*)`;
/// * supervised: `0.5 ||theta y - x||^2 + reg/2 ||theta - theta*||^2`
///   giving `(theta y - x) y^T + reg (theta - theta*)`.
pub fn linear_loss_grads(
    theta: &Tensor,
    theta_star: &Tensor,
    op: &LinearOp,
    x: &Tensor,
    y: &Tensor,
    mode: LossMode,
    reg_lambda: f64,
) -> Result<Tensor> {
    theta.ensure_same_shape(theta_star, "theta vs theta*")?;
    let model = LinearModel::new(theta.clone())?;
    model.ensure_fits(op)?;
    y.ensure_shape(op.output_shape(), "measurement")?;
    if x.len() != op.input_len() {
        return Err(Error::shape("signal does not match operator input"));
    }
    let fy = matvec(theta, y.data());
    let left: Vec<f64> = match mode {
        LossMode::Sup => fy.iter().zip(x.data()).map(|(a, b)| a - b).collect(),
        LossMode::Unsup => {
            let mut r = op.apply_raw(&fy);
            for (ri, yi) in r.iter_mut().zip(y.data()) {
                *ri -= yi;
            }
            op.adjoint_raw(&r)
        }
    };
    let (rows, cols) = (model.rows(), model.cols());
    let mut g = vec![0.0; rows * cols];
    for i in 0..rows {
        let li = left[i];
        let row = &mut g[i * cols..(i + 1) * cols];
        for (j, gij) in row.iter_mut().enumerate() {
            *gij = li * y.data()[j];
        }
    }
    if reg_lambda != 0.0 {
        for ((gij, t), ts) in g.iter_mut().zip(theta.data()).zip(theta_star.data()) {
            *gij += reg_lambda * (t - ts);
        }
    }
    Tensor::new(vec![rows, cols], g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn forward_examples() {
        let y = Tensor::from_slice(&[1.0, 1.0]);
        assert_eq!(linear_forward(&LinearModel::identity(2), &y).unwrap(), y);
        let zero = LinearModel::new(Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(linear_forward(&zero, &y).unwrap().data(), &[0.0, 0.0]);
        let m = LinearModel::new(Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(linear_forward(&m, &y).unwrap().data(), &[3.0, 1.0]);
        assert!(linear_forward(&m, &Tensor::from_slice(&[1.0])).is_err());
    }

    #[test]
    fn identity_is_stationary_for_unsup_identity_task() {
        let mut rng = Rng::new(1, 0);
        let x = rng.normal_tensor(&[3]);
        let id = LinearModel::identity(3).theta;
        let g = linear_loss_grads(&id, &id, &LinearOp::identity(&[3]), &x, &x, LossMode::Unsup, 0.7).unwrap();
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn sup_gradient_at_zero_is_minus_x_y() {
        let x = Tensor::from_slice(&[1.0, 2.0]);
        let y = Tensor::from_slice(&[3.0, -1.0]);
        let zero = Tensor::zeros(&[2, 2]);
        let g = linear_loss_grads(&zero, &zero, &LinearOp::identity(&[2]), &x, &y, LossMode::Sup, 0.0).unwrap();
        assert_eq!(g.data(), &[-3.0, 1.0, -6.0, 2.0]);
    }
}
