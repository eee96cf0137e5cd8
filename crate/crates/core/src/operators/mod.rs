//! Linear measurement operators, their pseudo-inverses and kernels,
//! the TV proximal operator and task generation.

mod linalg;
mod linear_op;
mod task;
mod tv;

pub use linalg::{cokernel_projector, kernel_projector, pinv_apply, FullSvd, RANK_CUTOFF};
pub use linear_op::{LinearOp, OpKind, MAX_DENSE_DIM};
pub use task::{make_task, Sample, Split, TargetTransform, Task, TaskKind};
pub use tv::{total_variation, tv_prox, tv_prox_report, TvProxReport, DEFAULT_MAX_ITER, DEFAULT_TOL};

use crate::error::Result;
use crate::tensor::Tensor;

/// Binary mask operator; `shape` must match the mask.
pub fn make_mask(shape: &[usize], mask: Tensor) -> Result<LinearOp> {
    mask.ensure_shape(shape, "mask")?;
    LinearOp::mask(mask)
}

pub fn make_conv(image_shape: &[usize], kernel: Tensor) -> Result<LinearOp> {
    LinearOp::conv(image_shape, kernel)
}

pub fn make_decimation(image_shape: &[usize], factor: usize) -> Result<LinearOp> {
    LinearOp::decimation(image_shape, factor)
}

pub fn make_fourier_mask(mask: Tensor) -> Result<LinearOp> {
    LinearOp::fourier_mask(mask)
}
