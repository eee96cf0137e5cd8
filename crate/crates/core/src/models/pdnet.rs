//! Unrolled primal-dual network.
//!
//! Each layer performs one primal-dual step for
//! `min_x 0.5 ||A x - y||^2 + lambda ||W x||_1`, with its own analysis
//! filter bank `W_k` (3x3, one input channel, `channels` outputs,
//! zero-padded) and threshold `lambda_k`:
//!
//! ```text
//! x' = x - tau A^T (A x - y) - tau W^T u
//! u' = clamp(u + gamma W (2 x' - x), -lambda, lambda)
//! ```
//!
//! The dual update is the prox of the conjugate of `lambda ||.||_1`, i.e.
//! projection on the l-infinity ball of radius `lambda`. Starting point is
//! `x0 = A^T y`, `u0 = 0`. Reverse mode is written out by hand; the same
//! code runs on dual numbers to obtain exact Hessian-vector products.

use crate::error::{Error, Result};
use crate::operators::LinearOp;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::params::{ParamLayout, ParamVector};
use super::scalar::{Dual, Scalar};

pub const DEFAULT_CHANNELS: usize = 40;
pub const DEFAULT_LAMBDA: f64 = 0.01;
const TAPS: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct PdnetLayer {
    /// `[channels, 1, 3, 3]`
    pub weights: Tensor,
    /// Thresholds are stored through their logarithm to stay positive.
    pub log_lambda: f64,
}

impl PdnetLayer {
    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdnetParams {
    pub layers: Vec<PdnetLayer>,
    pub tau: f64,
    pub gamma: f64,
}

impl PdnetParams {
    /// `W_k` entries uniform in `[-1/3, 1/3]`, `lambda_k = 0.01`.
    pub fn init(layers: usize, channels: usize, tau: f64, gamma: f64, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (TAPS as f64).sqrt();
        let layers = (0..layers)
            .map(|_| PdnetLayer {
                weights: rng.uniform_tensor(&[channels, 1, 3, 3], -bound, bound),
                log_lambda: DEFAULT_LAMBDA.ln(),
            })
            .collect();
        let p = Self { layers, tau, gamma };
        p.validate()?;
        Ok(p)
    }

    /// All filters zero; the network reduces to gradient steps on the data term.
    pub fn zero_filters(layers: usize, channels: usize, lambda: f64, tau: f64, gamma: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::invalid("lambda must be positive"));
        }
        let p = Self {
            layers: (0..layers)
                .map(|_| PdnetLayer {
                    weights: Tensor::zeros(&[channels, 1, 3, 3]),
                    log_lambda: lambda.ln(),
                })
                .collect(),
            tau,
            gamma,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("PDNet needs at least one layer"));
        }
        if !(self.tau > 0.0 && self.gamma > 0.0) {
            return Err(Error::invalid("tau and gamma must be positive"));
        }
        let c = self.channels();
        for (k, l) in self.layers.iter().enumerate() {
            if l.weights.shape() != [c, 1, 3, 3] {
                return Err(Error::shape(format!(
                    "layer {k} weights have shape {:?}",
                    l.weights.shape()
                )));
            }
            if !l.log_lambda.is_finite() {
                return Err(Error::invalid(format!("layer {k} threshold is not finite")));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.shape()[0])
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::Pdnet {
            layers: self.depth(),
            channels: self.channels(),
            tau: self.tau,
            gamma: self.gamma,
        }
    }

    pub fn to_params(&self) -> ParamVector {
        let mut values = Vec::with_capacity(self.layout().len());
        for l in &self.layers {
            values.extend_from_slice(l.weights.data());
            values.push(l.log_lambda);
        }
        ParamVector::new(self.layout(), values).expect("layout matches values")
    }

    pub fn from_params(p: &ParamVector) -> Result<Self> {
        let ParamLayout::Pdnet {
            layers,
            channels,
            tau,
            gamma,
        } = *p.layout()
        else {
            return Err(Error::shape("not a PDNet parameter vector"));
        };
        let per = channels * TAPS + 1;
        let layers = p
            .values()
            .chunks(per)
            .take(layers)
            .map(|chunk| PdnetLayer {
                weights: Tensor::new(vec![channels, 1, 3, 3], chunk[..per - 1].to_vec())
                    .expect("chunk length fixed by layout"),
                log_lambda: chunk[per - 1],
            })
            .collect();
        let out = Self { layers, tau, gamma };
        out.validate()?;
        Ok(out)
    }
}

/// Coordinatewise projection onto `[-radius, radius]`.
pub fn box_prox(u: &Tensor, radius: f64) -> Result<Tensor> {
    if !(radius >= 0.0) {
        return Err(Error::invalid(format!("radius must be >= 0, got {radius}")));
    }
    Ok(u.map(|v| v.clamp(-radius, radius)))
}

// ---------------------------------------------------------------------------
// generic kernels

#[derive(Clone, Copy)]
struct Grid {
    h: usize,
    w: usize,
    c: usize,
}

impl Grid {
    fn pixels(&self) -> usize {
        self.h * self.w
    }
}

/// `(W x)[c, i, j] = sum_{a,b} w[c, a, b] x[i + a - 1, j + b - 1]`, zero padded.
fn conv_fwd<S: Scalar>(wt: &[S], x: &[S], g: Grid) -> Vec<S> {
    let (h, w) = (g.h, g.w);
    let mut out = vec![S::default(); g.c * h * w];
    for c in 0..g.c {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for a in 0..3 {
            for b in 0..3 {
                let k = wt[c * TAPS + a * 3 + b];
                let (i0, i1) = (1usize.saturating_sub(a), (h + 1 - a).min(h));
                let (j0, j1) = (1usize.saturating_sub(b), (w + 1 - b).min(w));
                for i in i0..i1 {
                    let src = (i + a - 1) * w;
                    let dst = &mut plane[i * w..(i + 1) * w];
                    for j in j0..j1 {
                        dst[j] += k * x[src + j + b - 1];
                    }
                }
            }
        }
    }
    out
}

/// Exact adjoint of [`conv_fwd`].
fn conv_adj<S: Scalar>(wt: &[S], u: &[S], g: Grid) -> Vec<S> {
    let (h, w) = (g.h, g.w);
    let mut out = vec![S::default(); h * w];
    for c in 0..g.c {
        let plane = &u[c * h * w..(c + 1) * h * w];
        for a in 0..3 {
            for b in 0..3 {
                let k = wt[c * TAPS + a * 3 + b];
                let (i0, i1) = (1usize.saturating_sub(a), (h + 1 - a).min(h));
                let (j0, j1) = (1usize.saturating_sub(b), (w + 1 - b).min(w));
                for i in i0..i1 {
                    let dst = (i + a - 1) * w;
                    let src = &plane[i * w..(i + 1) * w];
                    for j in j0..j1 {
                        out[dst + j + b - 1] += k * src[j];
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `<u, W z>` with respect to the filter taps.
fn conv_wgrad<S: Scalar>(u: &[S], z: &[S], g: Grid, acc: &mut [S], scale: f64) {
    let (h, w) = (g.h, g.w);
    for c in 0..g.c {
        let plane = &u[c * h * w..(c + 1) * h * w];
        for a in 0..3 {
            for b in 0..3 {
                let (i0, i1) = (1usize.saturating_sub(a), (h + 1 - a).min(h));
                let (j0, j1) = (1usize.saturating_sub(b), (w + 1 - b).min(w));
                let mut s = S::default();
                for i in i0..i1 {
                    let src = (i + a - 1) * w;
                    let row = &plane[i * w..(i + 1) * w];
                    for j in j0..j1 {
                        s += row[j] * z[src + j + b - 1];
                    }
                }
                acc[c * TAPS + a * 3 + b] += s.scale(scale);
            }
        }
    }
}

struct Net<S> {
    weights: Vec<Vec<S>>,
    lambdas: Vec<S>,
    tau: f64,
    gamma: f64,
    grid: Grid,
}

/// Intermediate states of a forward pass.
struct GenericTape<S> {
    /// `x_0 .. x_K`
    xs: Vec<Vec<S>>,
    /// `u_0 .. u_K`
    us: Vec<Vec<S>>,
    /// pre-clamp dual values of layers `1 .. K`
    vs: Vec<Vec<S>>,
}

fn image_grid(op: &LinearOp, channels: usize) -> Result<Grid> {
    match op.input_shape() {
        [h, w] => Ok(Grid {
            h: *h,
            w: *w,
            c: channels,
        }),
        s => Err(Error::shape(format!("PDNet expects 2-D images, got {s:?}"))),
    }
}

fn clamp<S: Scalar>(v: S, lam: S) -> S {
    let (r, l) = (v.re(), lam.re());
    if r > l {
        lam
    } else if r < -l {
        -lam
    } else if r == l || r == -l {
        S::constant(r)
    } else {
        v
    }
}

impl<S: Scalar> Net<S> {
    fn layer(&self, k: usize, x: &[S], u: &[S], y: &[f64], op: &LinearOp) -> (Vec<S>, Vec<S>, Vec<S>) {
        let g = self.grid;
        let ax: Vec<S> = S::apply_op(op, x, false);
        let resid: Vec<S> = ax.iter().zip(y).map(|(&a, &b)| a - S::constant(b)).collect();
        let grad = S::apply_op(op, &resid, true);
        let wtu = conv_adj(&self.weights[k], u, g);
        let x_next: Vec<S> = (0..g.pixels())
            .map(|i| x[i] - (grad[i] + wtu[i]).scale(self.tau))
            .collect();
        let z: Vec<S> = x_next.iter().zip(x).map(|(&a, &b)| a.scale(2.0) - b).collect();
        let wz = conv_fwd(&self.weights[k], &z, g);
        let v: Vec<S> = u.iter().zip(&wz).map(|(&a, &b)| a + b.scale(self.gamma)).collect();
        let lam = self.lambdas[k];
        let u_next = v.iter().map(|&vi| clamp(vi, lam)).collect();
        (x_next, u_next, v)
    }

    fn forward(&self, y: &[f64], op: &LinearOp) -> GenericTape<S> {
        let x0: Vec<S> = op.adjoint_raw(y).into_iter().map(S::constant).collect();
        let u0 = vec![S::default(); self.grid.c * self.grid.pixels()];
        let mut tape = GenericTape {
            xs: vec![x0],
            us: vec![u0],
            vs: Vec::with_capacity(self.weights.len()),
        };
        for k in 0..self.weights.len() {
            let (x, u, v) = self.layer(k, &tape.xs[k], &tape.us[k], y, op);
            tape.xs.push(x);
            tape.us.push(u);
            tape.vs.push(v);
        }
        tape
    }

    /// Returns `(dW_k, dlambda_k)` of `<cot, x_K>`.
    fn vjp(&self, tape: &GenericTape<S>, cot: &[S], op: &LinearOp) -> (Vec<Vec<S>>, Vec<S>) {
        let g = self.grid;
        let depth = self.weights.len();
        let mut dw: Vec<Vec<S>> = vec![vec![S::default(); g.c * TAPS]; depth];
        let mut dlam = vec![S::default(); depth];
        let mut xbar: Vec<S> = cot.to_vec();
        let mut ubar: Vec<S> = vec![S::default(); g.c * g.pixels()];
        for k in (0..depth).rev() {
            let lam = self.lambdas[k].re();
            let v = &tape.vs[k];
            let mut vbar = vec![S::default(); v.len()];
            let mut lbar = S::default();
            for i in 0..v.len() {
                let r = v[i].re();
                if r > lam {
                    lbar += ubar[i];
                } else if r < -lam {
                    lbar += -ubar[i];
                } else if r < lam && r > -lam {
                    vbar[i] = ubar[i];
                }
            }
            dlam[k] = lbar;

            let (x_prev, x_next) = (&tape.xs[k], &tape.xs[k + 1]);
            let z: Vec<S> = x_next.iter().zip(x_prev).map(|(&a, &b)| a.scale(2.0) - b).collect();
            let zbar_full = conv_adj(&self.weights[k], &vbar, g);
            conv_wgrad(&vbar, &z, g, &mut dw[k], self.gamma);

            let xnext_bar: Vec<S> = xbar
                .iter()
                .zip(&zbar_full)
                .map(|(&a, &b)| a + b.scale(2.0 * self.gamma))
                .collect();

            let a_xb = S::apply_op(op, &xnext_bar, false);
            let ata_xb = S::apply_op(op, &a_xb, true);
            let mut xprev_bar: Vec<S> = (0..g.pixels())
                .map(|i| xnext_bar[i] - ata_xb[i].scale(self.tau))
                .collect();
            for (xb, zb) in xprev_bar.iter_mut().zip(&zbar_full) {
                *xb += -zb.scale(self.gamma);
            }

            let w_xb = conv_fwd(&self.weights[k], &xnext_bar, g);
            let mut uprev_bar = vbar;
            for (ub, wx) in uprev_bar.iter_mut().zip(&w_xb) {
                *ub += -wx.scale(self.tau);
            }
            conv_wgrad(&tape.us[k], &xnext_bar, g, &mut dw[k], -self.tau);

            xbar = xprev_bar;
            ubar = uprev_bar;
        }
        (dw, dlam)
    }
}

fn net_f64(params: &PdnetParams, grid: Grid) -> Net<f64> {
    Net {
        weights: params.layers.iter().map(|l| l.weights.data().to_vec()).collect(),
        lambdas: params.layers.iter().map(|l| l.lambda()).collect(),
        tau: params.tau,
        gamma: params.gamma,
        grid,
    }
}

/// Network whose parameters carry a tangent `direction` (packed layout).
fn net_dual(params: &PdnetParams, direction: &[f64], grid: Grid) -> Net<Dual> {
    let per = grid.c * TAPS + 1;
    let mut weights = Vec::with_capacity(params.depth());
    let mut lambdas = Vec::with_capacity(params.depth());
    for (k, l) in params.layers.iter().enumerate() {
        let d = &direction[k * per..(k + 1) * per];
        weights.push(
            l.weights
                .data()
                .iter()
                .zip(d)
                .map(|(&w, &dw)| Dual::new(w, dw))
                .collect(),
        );
        lambdas.push(Dual::new(l.log_lambda, d[per - 1]).exp());
    }
    Net {
        weights,
        lambdas,
        tau: params.tau,
        gamma: params.gamma,
        grid,
    }
}

/// Recorded forward pass, consumed by [`pdnet_vjp`].
pub struct PdnetTape {
    inner: GenericTape<f64>,
    fingerprint: u64,
    image_shape: Vec<usize>,
    op_input: Vec<usize>,
    op_output: Vec<usize>,
    op_kind: crate::operators::OpKind,
}

impl PdnetTape {
    /// Primal iterates `x_0 .. x_K`.
    pub fn primal_iterates(&self) -> impl Iterator<Item = Tensor> + '_ {
        self.inner
            .xs
            .iter()
            .map(|x| Tensor::new(self.image_shape.clone(), x.clone()).expect("image shape"))
    }

    /// Smallest distance of any pre-clamp dual value to the clamp boundary.
    pub fn min_boundary_distance(&self, params: &PdnetParams) -> f64 {
        self.inner
            .vs
            .iter()
            .zip(&params.layers)
            .flat_map(|(v, l)| {
                let lam = l.lambda();
                v.iter().map(move |x| (x.abs() - lam).abs())
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Gradients in natural parametrization (`W_k`, `lambda_k`).
#[derive(Clone, Debug, PartialEq)]
pub struct PdnetGrad {
    pub weights: Vec<Tensor>,
    pub lambdas: Vec<f64>,
}

impl PdnetGrad {
    /// Packs into the trainable layout, converting `d/dlambda` to `d/dlog(lambda)`.
    pub fn to_param_grad(&self, params: &PdnetParams) -> ParamVector {
        let mut values = Vec::with_capacity(params.layout().len());
        for ((w, dl), layer) in self.weights.iter().zip(&self.lambdas).zip(&params.layers) {
            values.extend_from_slice(w.data());
            values.push(dl * layer.lambda());
        }
        ParamVector::new(params.layout(), values).expect("layout matches")
    }
}

/// One layer: returns `(x', u')`.
#[allow(clippy::too_many_arguments)]
pub fn pdnet_layer(
    x: &Tensor,
    u: &Tensor,
    y: &Tensor,
    op: &LinearOp,
    weights: &Tensor,
    lambda: f64,
    tau: f64,
    gamma: f64,
) -> Result<(Tensor, Tensor)> {
    x.ensure_shape(op.input_shape(), "primal iterate")?;
    y.ensure_shape(op.output_shape(), "measurement")?;
    if weights.shape().len() != 4 || weights.shape()[1..] != [1, 3, 3] {
        return Err(Error::shape(format!(
            "weights must be [C, 1, 3, 3], got {:?}",
            weights.shape()
        )));
    }
    let channels = weights.shape()[0];
    let grid = image_grid(op, channels)?;
    u.ensure_shape(&[channels, grid.h, grid.w], "dual iterate")?;
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda must be non-negative"));
    }
    let net = Net {
        weights: vec![weights.data().to_vec()],
        lambdas: vec![lambda],
        tau,
        gamma,
        grid,
    };
    let (xn, un, _) = net.layer(0, x.data(), u.data(), y.data(), op);
    Ok((
        Tensor::new(x.shape().to_vec(), xn)?,
        Tensor::new(u.shape().to_vec(), un)?,
    ))
}

/// Runs all layers from `x0 = A^T y`, `u0 = 0`.
pub fn pdnet_forward(params: &PdnetParams, y: &Tensor, op: &LinearOp) -> Result<(Tensor, PdnetTape)> {
    params.validate()?;
    y.ensure_shape(op.output_shape(), "measurement")?;
    let grid = image_grid(op, params.channels())?;
    let net = net_f64(params, grid);
    let inner = net.forward(y.data(), op);
    let x = Tensor::new(op.input_shape().to_vec(), inner.xs.last().expect("x0").clone())?;
    let tape = PdnetTape {
        inner,
        fingerprint: params.to_params().fingerprint(),
        image_shape: op.input_shape().to_vec(),
        op_input: op.input_shape().to_vec(),
        op_output: op.output_shape().to_vec(),
        op_kind: op.kind(),
    };
    Ok((x, tape))
}

/// Gradient of `<cotangent, x_K>` with respect to every `W_k` and `lambda_k`.
pub fn pdnet_vjp(params: &PdnetParams, tape: &PdnetTape, cotangent: &Tensor, op: &LinearOp) -> Result<PdnetGrad> {
    if tape.fingerprint != params.to_params().fingerprint()
        || tape.op_input != op.input_shape()
        || tape.op_output != op.output_shape()
        || tape.op_kind != op.kind()
    {
        return Err(Error::StaleTape);
    }
    cotangent.ensure_shape(&tape.image_shape, "cotangent")?;
    let grid = image_grid(op, params.channels())?;
    let net = net_f64(params, grid);
    let (dw, dlam) = net.vjp(&tape.inner, cotangent.data(), op);
    Ok(PdnetGrad {
        weights: dw
            .into_iter()
            .map(|w| Tensor::new(vec![grid.c, 1, 3, 3], w).expect("filter shape"))
            .collect(),
        lambdas: dlam,
    })
}

/// How a per-sample loss turns the network output into a cotangent.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Residual<'a> {
    /// `0.5 ||f - x||^2`
    Sup(&'a [f64]),
    /// `0.5 ||A f - y||^2`
    Unsup,
}

fn loss_and_cot<S: Scalar>(out: &[S], y: &[f64], op: &LinearOp, residual: Residual<'_>) -> (S, Vec<S>) {
    match residual {
        Residual::Sup(x) => {
            let r: Vec<S> = out.iter().zip(x).map(|(&a, &b)| a - S::constant(b)).collect();
            let loss = r.iter().fold(S::default(), |acc, &v| acc + v * v).scale(0.5);
            (loss, r)
        }
        Residual::Unsup => {
            let af = S::apply_op(op, out, false);
            let r: Vec<S> = af.iter().zip(y).map(|(&a, &b)| a - S::constant(b)).collect();
            let loss = r.iter().fold(S::default(), |acc, &v| acc + v * v).scale(0.5);
            (loss, S::apply_op(op, &r, true))
        }
    }
}

fn pack_grad<S: Scalar>(dw: &[Vec<S>], dlam: &[S], lambdas: &[S], out: &mut [S]) {
    let per = dw.first().map_or(0, |w| w.len()) + 1;
    for k in 0..dw.len() {
        let chunk = &mut out[k * per..(k + 1) * per];
        for (o, &g) in chunk.iter_mut().zip(&dw[k]) {
            *o += g;
        }
        // d/dlog(lambda) = lambda d/dlambda
        chunk[per - 1] += dlam[k] * lambdas[k];
    }
}

/// Loss and packed gradient of one sample.
pub(crate) fn sample_loss_grad(
    params: &PdnetParams,
    y: &[f64],
    op: &LinearOp,
    residual: Residual<'_>,
    grad: &mut [f64],
) -> Result<f64> {
    let grid = image_grid(op, params.channels())?;
    let net = net_f64(params, grid);
    let tape = net.forward(y, op);
    let out = tape.xs.last().expect("x_K");
    let (loss, cot) = loss_and_cot(out, y, op, residual);
    let (dw, dlam) = net.vjp(&tape, &cot, op);
    pack_grad(&dw, &dlam, &net.lambdas, grad);
    Ok(loss)
}

/// Gradient and Hessian-vector product (tangent part) of one sample's loss
/// along `direction`, both in the packed layout.
pub(crate) fn sample_grad_hvp(
    params: &PdnetParams,
    direction: &[f64],
    y: &[f64],
    op: &LinearOp,
    residual: Residual<'_>,
    grad: &mut [f64],
    hvp: &mut [f64],
) -> Result<()> {
    let grid = image_grid(op, params.channels())?;
    let net = net_dual(params, direction, grid);
    let tape = net.forward(y, op);
    let out = tape.xs.last().expect("x_K");
    let (_, cot) = loss_and_cot(out, y, op, residual);
    let (dw, dlam) = net.vjp(&tape, &cot, op);
    let mut packed = vec![Dual::default(); grad.len()];
    pack_grad(&dw, &dlam, &net.lambdas, &mut packed);
    for ((g, h), d) in grad.iter_mut().zip(hvp.iter_mut()).zip(&packed) {
        *g += d.re;
        *h += d.du;
    }
    Ok(())
}

/// Network output only.
pub(crate) fn forward_raw(params: &PdnetParams, y: &[f64], op: &LinearOp) -> Result<Vec<f64>> {
    let grid = image_grid(op, params.channels())?;
    let net = net_f64(params, grid);
    let mut x: Vec<f64> = op.adjoint_raw(y);
    let mut u = vec![0.0; grid.c * grid.pixels()];
    for k in 0..params.depth() {
        let (xn, un, _) = net.layer(k, &x, &u, y, op);
        x = xn;
        u = un;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn random_params(depth: usize, channels: usize, seed: u64) -> PdnetParams {
        let mut rng = Rng::new(seed, 0);
        let mut p = PdnetParams::init(depth, channels, 0.5, 0.5, &mut rng).unwrap();
        for l in &mut p.layers {
            l.log_lambda = rng.uniform_range(0.05, 0.3).ln();
        }
        p
    }

    #[test]
    fn box_prox_examples() {
        let u = Tensor::from_slice(&[2.0, -0.5, 0.1]);
        assert_eq!(box_prox(&u, 1.0).unwrap().data(), &[1.0, -0.5, 0.1]);
        assert_eq!(box_prox(&u, 0.0).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(box_prox(&u, 2.0).unwrap(), u);
        assert!(box_prox(&u, -1.0).is_err());
    }

    #[test]
    fn conv_adjoint_matches_dense_materialization() {
        let mut rng = Rng::new(4, 0);
        let g = Grid { h: 5, w: 4, c: 3 };
        let wt = rng.normal_tensor(&[3 * 9]);
        let n = g.pixels();
        let mut dense = DMatrix::zeros(g.c * n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            for (i, v) in conv_fwd(wt.data(), &e, g).into_iter().enumerate() {
                dense[(i, j)] = v;
            }
        }
        let u = rng.normal_tensor(&[g.c * n]);
        let via_dense = dense.transpose() * nalgebra::DVector::from_column_slice(u.data());
        let via_adj = conv_adj(wt.data(), u.data(), g);
        for (a, b) in via_dense.iter().zip(&via_adj) {
            assert!((a - b).abs() < 1e-12);
        }
        let x = rng.normal_tensor(&[n]);
        let lhs: f64 = conv_fwd(wt.data(), x.data(), g)
            .iter()
            .zip(u.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = via_adj.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10);
    }

    #[test]
    fn zero_filter_layer_is_gradient_step() {
        let mut rng = Rng::new(1, 0);
        let op = LinearOp::mask(Tensor::new(vec![4, 4], (0..16).map(|i| (i % 2) as f64).collect()).unwrap()).unwrap();
        let x = rng.normal_tensor(&[4, 4]);
        let y = op.apply(&rng.normal_tensor(&[4, 4])).unwrap();
        let u = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        let (xn, un) = pdnet_layer(&x, &u, &y, &op, &w, 0.3, 0.4, 0.5).unwrap();
        let expected = x.sub(&op.adjoint(&op.apply(&x).unwrap().sub(&y)).unwrap().scale(0.4));
        assert_eq!(xn, expected);
        assert_eq!(un, u);
    }

    #[test]
    fn identity_fixed_point() {
        let y = Rng::new(2, 0).normal_tensor(&[6, 6]);
        let op = LinearOp::identity(&[6, 6]);
        let p = PdnetParams::zero_filters(5, 4, 0.1, 0.3, 0.3).unwrap();
        let (x, _) = pdnet_forward(&p, &y, &op).unwrap();
        assert!(crate::tensor::distance(&x, &y) <= 1e-12);
    }

    #[test]
    fn pack_unpack_is_exact() {
        let p = random_params(3, 5, 9);
        let v = p.to_params();
        let back = PdnetParams::from_params(&v).unwrap();
        assert_eq!(back.to_params().values(), v.values());
        assert_eq!(back, p);
    }

    #[test]
    fn stale_tape_rejected() {
        let p = random_params(2, 3, 1);
        let op = LinearOp::identity(&[5, 5]);
        let y = Rng::new(0, 0).normal_tensor(&[5, 5]);
        let (_, tape) = pdnet_forward(&p, &y, &op).unwrap();
        let mut q = p.clone();
        q.layers[0].log_lambda += 0.1;
        let cot = Tensor::zeros(&[5, 5]);
        assert!(matches!(pdnet_vjp(&q, &tape, &cot, &op), Err(Error::StaleTape)));
        assert!(pdnet_vjp(&p, &tape, &cot, &op).is_ok());
    }

    #[test]
    fn zero_cotangent_and_dead_branch() {
        let p = random_params(2, 3, 1);
        let op = LinearOp::identity(&[5, 5]);
        let y = Rng::new(0, 0).normal_tensor(&[5, 5]);
        let (_, tape) = pdnet_forward(&p, &y, &op).unwrap();
        let g = pdnet_vjp(&p, &tape, &Tensor::zeros(&[5, 5]), &op).unwrap();
        assert!(g.weights.iter().all(|w| w.max_abs() == 0.0));
        assert!(g.lambdas.iter().all(|&l| l == 0.0));

        let z = PdnetParams::zero_filters(3, 3, 0.05, 0.4, 0.4).unwrap();
        let (_, tape) = pdnet_forward(&z, &y, &op).unwrap();
        let cot = Rng::new(5, 0).normal_tensor(&[5, 5]);
        let g = pdnet_vjp(&z, &tape, &cot, &op).unwrap();
        assert!(g.lambdas.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn hvp_matches_difference_of_gradients() {
        let p = random_params(2, 3, 3);
        let mut rng = Rng::new(8, 0);
        let op = LinearOp::decimation(&[6, 6], 2).unwrap();
        let x = rng.uniform_tensor(&[6, 6], 0.0, 1.0);
        let y = op.apply(&x).unwrap();
        let dir = rng.normal_tensor(&[p.layout().len()]);
        let n = dir.len();
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n];
        sample_grad_hvp(&p, dir.data(), y.data(), &op, Residual::Sup(x.data()), &mut g, &mut h).unwrap();

        let eps = 1e-6;
        let shifted = |s: f64| {
            let base = p.to_params();
            let vals: Vec<f64> = base.values().iter().zip(dir.data()).map(|(a, d)| a + s * d).collect();
            let q = PdnetParams::from_params(&base.with_values(vals).unwrap()).unwrap();
            let mut out = vec![0.0; n];
            sample_loss_grad(&q, y.data(), &op, Residual::Sup(x.data()), &mut out).unwrap();
            out
        };
        let (gp, gm) = (shifted(eps), shifted(-eps));
        let mut g0 = vec![0.0; n];
        sample_loss_grad(&p, y.data(), &op, Residual::Sup(x.data()), &mut g0).unwrap();
        let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        let num: f64 = fd.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num / den < 1e-5, "rel {}", num / den);
        assert!(g.iter().zip(&g0).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
