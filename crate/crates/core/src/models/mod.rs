//! Reconstruction models: a linear map of the measurements and an unrolled
//! primal-dual network.

mod linear;
mod params;
pub mod pdnet;
mod scalar;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::LinearOp;
use crate::tensor::Tensor;

pub use linear::{linear_forward, linear_loss_grads, LinearModel};
pub use params::{ParamLayout, ParamVector};
pub use pdnet::{box_prox, pdnet_forward, pdnet_layer, pdnet_vjp, PdnetGrad, PdnetLayer, PdnetParams, PdnetTape};
pub use scalar::{Dual, Scalar};

/// Which loss a training step uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Needs ground truth: `0.5 ||f(y) - x||^2`.
    Sup,
    /// Measurement consistency only: `0.5 ||A f(y) - y||^2`.
    Unsup,
}

/// Parameters of either model family.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelState {
    Linear(LinearModel),
    Pdnet(PdnetParams),
}

impl ModelState {
    pub fn from_params(p: &ParamVector) -> Result<Self> {
        match p.layout() {
            ParamLayout::Linear { .. } => LinearModel::from_params(p).map(ModelState::Linear),
            ParamLayout::Pdnet { .. } => PdnetParams::from_params(p).map(ModelState::Pdnet),
        }
    }

    pub fn to_params(&self) -> ParamVector {
        match self {
            ModelState::Linear(m) => m.to_params(),
            ModelState::Pdnet(p) => p.to_params(),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            ModelState::Linear(_) => "linear",
            ModelState::Pdnet(_) => "pdnet",
        }
    }

    /// Reconstruction `f(y)` in the operator's signal shape.
    pub fn reconstruct(&self, y: &Tensor, op: &LinearOp) -> Result<Tensor> {
        y.ensure_shape(op.output_shape(), "measurement")?;
        match self {
            ModelState::Linear(m) => {
                m.ensure_fits(op)?;
                linear_forward(m, y)?.reshape(op.input_shape())
            }
            ModelState::Pdnet(p) => {
                if op.input_shape().len() != 2 {
                    return Err(Error::shape("PDNet needs a 2-D signal space"));
                }
                Tensor::new(op.input_shape().to_vec(), pdnet::forward_raw(p, y.data(), op)?)
            }
        }
    }
}
