use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest input dimension that may be materialized as a dense matrix.
pub const MAX_DENSE_DIM: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Identity,
    Mask,
    Conv,
    Decimate,
    FourierMask,
    Dense,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Identity => "identity",
            OpKind::Mask => "mask",
            OpKind::Conv => "conv",
            OpKind::Decimate => "decimate",
            OpKind::FourierMask => "fourier-mask",
            OpKind::Dense => "dense",
        }
    }
}

#[derive(Clone)]
struct Fft2 {
    rows_fwd: Arc<dyn Fft<f64>>,
    rows_inv: Arc<dyn Fft<f64>>,
    cols_fwd: Arc<dyn Fft<f64>>,
    cols_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows_fwd: planner.plan_fft_forward(w),
            rows_inv: planner.plan_fft_inverse(w),
            cols_fwd: planner.plan_fft_forward(h),
            cols_inv: planner.plan_fft_inverse(h),
        }
    }

    /// Unitary 2-D transform in place on a row-major `h x w` buffer.
    fn transform(&self, buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
        let (rows, cols) = if inverse {
            (&self.rows_inv, &self.cols_inv)
        } else {
            (&self.rows_fwd, &self.cols_fwd)
        };
        for row in buf.chunks_mut(w) {
            rows.process(row);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                column[i] = buf[i * w + j];
            }
            cols.process(&mut column);
            for i in 0..h {
                buf[i * w + j] = column[i];
            }
        }
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

#[derive(Clone)]
enum Repr {
    Identity,
    Mask(Tensor),
    Conv(Tensor),
    Decimate(usize),
    FourierMask { mask: Tensor, fft: Fft2 },
    Dense(DMatrix<f64>),
}

/// A linear measurement operator with its exact adjoint.
///
/// Operators are immutable once built and can be shared across threads.
#[derive(Clone)]
pub struct LinearOp {
    repr: Repr,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl fmt::Debug for LinearOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearOp")
            .field("kind", &self.kind())
            .field("input_shape", &self.input_shape)
            .field("output_shape", &self.output_shape)
            .finish()
    }
}

fn check_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("mask entries must be 0 or 1"));
    }
    Ok(())
}

impl LinearOp {
    pub fn identity(shape: &[usize]) -> Self {
        Self {
            repr: Repr::Identity,
            input_shape: shape.to_vec(),
            output_shape: shape.to_vec(),
        }
    }

    /// Elementwise binary mask `y = M * x`.
    pub fn mask(mask: Tensor) -> Result<Self> {
        check_binary(&mask)?;
        let shape = mask.shape().to_vec();
        Ok(Self {
            repr: Repr::Mask(mask),
            input_shape: shape.clone(),
            output_shape: shape,
        })
    }

    /// Circular 2-D convolution of `image_shape` images with an odd-sized kernel.
    pub fn conv(image_shape: &[usize], kernel: Tensor) -> Result<Self> {
        if image_shape.len() != 2 || kernel.shape().len() != 2 {
            return Err(Error::shape("convolution expects 2-D image and kernel"));
        }
        let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("kernel dimensions must be odd, got {kh}x{kw}")));
        }
        if kh > image_shape[0] || kw > image_shape[1] {
            return Err(Error::invalid("kernel larger than the image"));
        }
        Ok(Self {
            repr: Repr::Conv(kernel),
            input_shape: image_shape.to_vec(),
            output_shape: image_shape.to_vec(),
        })
    }

    /// Keeps every `factor`-th sample along each axis (1-D or 2-D signals).
    pub fn decimation(image_shape: &[usize], factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::invalid("decimation factor must be at least 2"));
        }
        if image_shape.is_empty() || image_shape.len() > 2 {
            return Err(Error::shape("decimation supports 1-D and 2-D signals"));
        }
        if image_shape.iter().any(|d| d % factor != 0) {
            return Err(Error::invalid(format!(
                "dimensions {image_shape:?} not divisible by {factor}"
            )));
        }
        Ok(Self {
            repr: Repr::Decimate(factor),
            input_shape: image_shape.to_vec(),
            output_shape: image_shape.iter().map(|d| d / factor).collect(),
        })
    }

    /// Unitary 2-D DFT followed by a binary frequency mask.
    ///
    /// Output is a `[2, h, w]` tensor holding real and imaginary parts.
    pub fn fourier_mask(mask: Tensor) -> Result<Self> {
        check_binary(&mask)?;
        if mask.shape().len() != 2 {
            return Err(Error::shape("frequency mask must be 2-D"));
        }
        let (h, w) = (mask.shape()[0], mask.shape()[1]);
        Ok(Self {
            repr: Repr::FourierMask {
                mask,
                fft: Fft2::new(h, w),
            },
            input_shape: vec![h, w],
            output_shape: vec![2, h, w],
        })
    }

    /// Explicit matrix acting on flattened signals.
    pub fn dense(matrix: DMatrix<f64>, input_shape: &[usize], output_shape: &[usize]) -> Result<Self> {
        let n: usize = input_shape.iter().product();
        let m: usize = output_shape.iter().product();
        if matrix.shape() != (m, n) {
            return Err(Error::shape(format!(
                "matrix is {:?}, shapes need ({m}, {n})",
                matrix.shape()
            )));
        }
        Ok(Self {
            repr: Repr::Dense(matrix),
            input_shape: input_shape.to_vec(),
            output_shape: output_shape.to_vec(),
        })
    }

    /// Dense operator from an `m x n` matrix acting on vectors.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let (m, n) = matrix.shape();
        Self {
            repr: Repr::Dense(matrix),
            input_shape: vec![n],
            output_shape: vec![m],
        }
    }

    pub fn kind(&self) -> OpKind {
        match self.repr {
            Repr::Identity => OpKind::Identity,
            Repr::Mask(_) => OpKind::Mask,
            Repr::Conv(_) => OpKind::Conv,
            Repr::Decimate(_) => OpKind::Decimate,
            Repr::FourierMask { .. } => OpKind::FourierMask,
            Repr::Dense(_) => OpKind::Dense,
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    /// The binary mask of a mask operator.
    pub fn mask_values(&self) -> Option<&Tensor> {
        match &self.repr {
            Repr::Mask(m) => Some(m),
            _ => None,
        }
    }

    pub fn decimation_factor(&self) -> Option<usize> {
        match self.repr {
            Repr::Decimate(f) => Some(f),
            _ => None,
        }
    }

    pub fn conv_kernel(&self) -> Option<&Tensor> {
        match &self.repr {
            Repr::Conv(k) => Some(k),
            _ => None,
        }
    }

    pub fn frequency_mask(&self) -> Option<&Tensor> {
        match &self.repr {
            Repr::FourierMask { mask, .. } => Some(mask),
            _ => None,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.ensure_shape(&self.input_shape, "operator input")?;
        let out = self.apply_raw(x.data());
        Tensor::new(self.output_shape.clone(), out)
    }

    pub fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        y.ensure_shape(&self.output_shape, "operator adjoint input")?;
        let out = self.adjoint_raw(y.data());
        Tensor::new(self.input_shape.clone(), out)
    }

    /// `A^T A x`
    pub fn normal(&self, x: &Tensor) -> Result<Tensor> {
        self.adjoint(&self.apply(x)?)
    }

    /// Forward map on a flat buffer of length `input_len()`.
    pub fn apply_raw(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_len());
        match &self.repr {
            Repr::Identity => x.to_vec(),
            Repr::Mask(m) => x.iter().zip(m.data()).map(|(a, b)| a * b).collect(),
            Repr::Conv(k) => self.circular(x, k, false),
            Repr::Decimate(f) => self.decimate(x, *f),
            Repr::FourierMask { mask, fft } => {
                let (h, w) = (self.input_shape[0], self.input_shape[1]);
                let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                fft.transform(&mut buf, h, w, false);
                let mut out = vec![0.0; 2 * h * w];
                for (idx, (c, &m)) in buf.iter().zip(mask.data()).enumerate() {
                    out[idx] = c.re * m;
                    out[h * w + idx] = c.im * m;
                }
                out
            }
            Repr::Dense(a) => {
                let v = nalgebra::DVectorView::from_slice(x, x.len());
                (a * v).as_slice().to_vec()
            }
        }
    }

    /// Adjoint map on a flat buffer of length `output_len()`.
    pub fn adjoint_raw(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.output_len());
        match &self.repr {
            Repr::Identity => y.to_vec(),
            Repr::Mask(m) => y.iter().zip(m.data()).map(|(a, b)| a * b).collect(),
            Repr::Conv(k) => self.circular(y, k, true),
            Repr::Decimate(f) => self.upsample(y, *f),
            Repr::FourierMask { mask, fft } => {
                let (h, w) = (self.input_shape[0], self.input_shape[1]);
                let n = h * w;
                let mut buf: Vec<Complex64> = (0..n)
                    .map(|i| Complex64::new(y[i], y[n + i]) * mask.data()[i])
                    .collect();
                fft.transform(&mut buf, h, w, true);
                buf.iter().map(|c| c.re).collect()
            }
            Repr::Dense(a) => {
                let v = nalgebra::DVectorView::from_slice(y, y.len());
                (a.tr_mul(&v)).as_slice().to_vec()
            }
        }
    }

    /// Circular convolution (or correlation when `adjoint`), kernel centred.
    fn circular(&self, x: &[f64], k: &Tensor, adjoint: bool) -> Vec<f64> {
        let (h, w) = (self.input_shape[0], self.input_shape[1]);
        let (kh, kw) = (k.shape()[0], k.shape()[1]);
        let (ch, cw) = (kh / 2, kw / 2);
        let mut out = vec![0.0; h * w];
        for a in 0..kh {
            for b in 0..kw {
                let kv = k.data()[a * kw + b];
                if kv == 0.0 {
                    continue;
                }
                // convolution: out[i] += k[a] x[i - (a - c)]; correlation flips the shift
                let (di, dj) = if adjoint {
                    ((a + h - ch) % h, (b + w - cw) % w)
                } else {
                    ((ch + h - a) % h, (cw + w - b) % w)
                };
                for i in 0..h {
                    let si = (i + di) % h;
                    let row_out = &mut out[i * w..(i + 1) * w];
                    let row_in = &x[si * w..(si + 1) * w];
                    for j in 0..w {
                        row_out[j] += kv * row_in[(j + dj) % w];
                    }
                }
            }
        }
        out
    }

    fn decimate(&self, x: &[f64], f: usize) -> Vec<f64> {
        match self.input_shape.as_slice() {
            [_] => x.iter().step_by(f).copied().collect(),
            [h, w] => {
                let mut out = Vec::with_capacity((h / f) * (w / f));
                for i in (0..*h).step_by(f) {
                    for j in (0..*w).step_by(f) {
                        out.push(x[i * w + j]);
                    }
                }
                out
            }
            _ => unreachable!("validated at construction"),
        }
    }

    fn upsample(&self, y: &[f64], f: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.input_len()];
        match self.input_shape.as_slice() {
            [_] => {
                for (i, &v) in y.iter().enumerate() {
                    out[i * f] = v;
                }
            }
            [_, w] => {
                let sw = w / f;
                for (idx, &v) in y.iter().enumerate() {
                    let (i, j) = (idx / sw, idx % sw);
                    out[i * f * w + j * f] = v;
                }
            }
            _ => unreachable!("validated at construction"),
        }
        out
    }

    /// Dense `m x n` matrix of the operator on flattened signals.
    pub fn materialize(&self) -> Result<DMatrix<f64>> {
        let n = self.input_len();
        let m = self.output_len();
        if n > MAX_DENSE_DIM || m > 2 * MAX_DENSE_DIM {
            return Err(Error::TooLarge {
                size: n.max(m),
                limit: MAX_DENSE_DIM,
                hint: "use the mask fast path or a smaller signal",
            });
        }
        if let Repr::Dense(a) = &self.repr {
            return Ok(a.clone());
        }
        let mut mat = DMatrix::zeros(m, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.apply_raw(&e);
            for (i, v) in col.into_iter().enumerate() {
                mat[(i, j)] = v;
            }
            e[j] = 0.0;
        }
        Ok(mat)
    }
}
