//! SVD-based subspace machinery: kernel projectors and pseudo-inverses.

use nalgebra::{DMatrix, DVector};

use super::linear_op::{LinearOp, OpKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_CUTOFF: f64 = 1e-10;

/// Full singular value decomposition of an `m x n` matrix with the right
/// basis completed to `n x n` and singular values sorted descending.
pub struct FullSvd {
    /// `rows x r` left singular vectors for the retained singular values.
    pub u: DMatrix<f64>,
    /// Singular values, descending, length `n` (zero-padded).
    pub singular_values: Vec<f64>,
    /// `n x n` orthogonal matrix, column `j` is the `j`-th right singular vector.
    pub v: DMatrix<f64>,
    pub rank: usize,
}

impl FullSvd {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let rows = m.max(n);
        let mut padded = DMatrix::zeros(rows, n);
        padded.view_mut((0, 0), (m, n)).copy_from(a);
        let svd = padded.svd(true, true);
        let u_all = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested V^T");
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

        let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
        let smax = singular_values.first().copied().unwrap_or(0.0);
        let rank = if smax > 0.0 {
            singular_values.iter().take_while(|&&s| s > RANK_CUTOFF * smax).count()
        } else {
            0
        };
        let mut v = DMatrix::zeros(n, n);
        let mut u = DMatrix::zeros(m, rank);
        for (col, &src) in order.iter().enumerate() {
            for k in 0..n {
                v[(k, col)] = v_t[(src, k)];
            }
            if col < rank {
                for k in 0..m {
                    u[(k, col)] = u_all[(k, src)];
                }
            }
        }
        Self {
            u,
            singular_values,
            v,
            rank,
        }
    }

    /// Orthonormal basis of the row space, `n x rank`.
    pub fn row_space(&self) -> DMatrix<f64> {
        self.v.columns(0, self.rank).into_owned()
    }

    /// Orthonormal basis of the null space, `n x (n - rank)`.
    pub fn null_space(&self) -> DMatrix<f64> {
        let n = self.v.ncols();
        self.v.columns(self.rank, n - self.rank).into_owned()
    }

    /// `A^+ y` for `y` of length `m`.
    pub fn pinv_apply(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut coeffs = self.u.tr_mul(y);
        for (k, c) in coeffs.iter_mut().enumerate() {
            *c /= self.singular_values[k];
        }
        self.v.columns(0, self.rank) * coeffs
    }
}

/// Orthogonal projector onto `Ker(A)` as an `n x n` matrix.
///
/// Masks use the analytic form `diag(1 - M)`; everything else goes
/// through an SVD of the materialized operator.
pub fn kernel_projector(op: &LinearOp) -> Result<DMatrix<f64>> {
    if let Some(mask) = op.mask_values() {
        let diag = DVector::from_iterator(mask.len(), mask.data().iter().map(|m| 1.0 - m));
        return Ok(DMatrix::from_diagonal(&diag));
    }
    if op.kind() == OpKind::Identity && op.input_len() <= super::linear_op::MAX_DENSE_DIM {
        let n = op.input_len();
        return Ok(DMatrix::zeros(n, n));
    }
    let a = op.materialize().map_err(|e| match e {
        Error::TooLarge { size, limit, .. } => Error::TooLarge {
            size,
            limit,
            hint: "kernel projectors of large operators are only available for masks",
        },
        other => other,
    })?;
    let svd = FullSvd::new(&a);
    let basis = svd.null_space();
    Ok(&basis * basis.transpose())
}

/// Orthogonal projector onto `Ker(A^T)` (measurements the operator can never
/// produce) as an `m x m` matrix.
pub fn cokernel_projector(op: &LinearOp) -> Result<DMatrix<f64>> {
    if let Some(mask) = op.mask_values() {
        let diag = DVector::from_iterator(mask.len(), mask.data().iter().map(|m| 1.0 - m));
        return Ok(DMatrix::from_diagonal(&diag));
    }
    if op.kind() == OpKind::Identity && op.output_len() <= super::linear_op::MAX_DENSE_DIM {
        let m = op.output_len();
        return Ok(DMatrix::zeros(m, m));
    }
    let a = op.materialize()?;
    let svd = FullSvd::new(&a);
    let m = a.nrows();
    Ok(DMatrix::identity(m, m) - &svd.u * svd.u.transpose())
}

/// Moore-Penrose pseudo-inverse applied to a measurement.
pub fn pinv_apply(op: &LinearOp, y: &Tensor) -> Result<Tensor> {
    y.ensure_shape(op.output_shape(), "pseudo-inverse input")?;
    match op.kind() {
        OpKind::Identity | OpKind::Mask | OpKind::Decimate => return op.adjoint(y),
        OpKind::FourierMask => {
            let full = op.frequency_mask().is_some_and(|m| m.data().iter().all(|&v| v == 1.0));
            if full {
                return op.adjoint(y);
            }
        }
        _ => {}
    }
    let a = op.materialize()?;
    let svd = FullSvd::new(&a);
    let x = svd.pinv_apply(&y.to_dvector());
    Tensor::from_dvector(&x, op.input_shape())
}
