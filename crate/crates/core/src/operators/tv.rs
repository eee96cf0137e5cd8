//! Proximal operator of isotropic discrete total variation.
//!
//! Solves `argmin_x strength * TV(x) + 0.5 * ||x - y||^2` through its dual,
//! a projection problem over pointwise unit balls, with accelerated
//! projected gradient iterations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 500;

/// Lipschitz bound of `D D^T` for 2-D forward differences.
const GRAD_NORM_SQ: f64 = 8.0;

#[derive(Clone, Debug)]
pub struct TvProxReport {
    pub solution: Tensor,
    pub iterations: usize,
    pub primal: f64,
    pub dual: f64,
}

impl TvProxReport {
    /// Duality gap relative to the primal objective.
    pub fn relative_gap(&self) -> f64 {
        (self.primal - self.dual).max(0.0) / self.primal.abs().max(1e-300)
    }
}

fn dims(y: &Tensor) -> Result<(usize, usize)> {
    match y.shape() {
        [n] => Ok((1, *n)),
        [h, w] => Ok((*h, *w)),
        s => Err(Error::shape(format!("tv_prox expects 1-D or 2-D input, got {s:?}"))),
    }
}

/// Forward differences with zero flux at the far boundary; output `[2, h, w]`.
fn gradient(x: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let (gx, gy) = out.split_at_mut(h * w);
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            gx[k] = if i + 1 < h { x[k + w] - x[k] } else { 0.0 };
            gy[k] = if j + 1 < w { x[k + 1] - x[k] } else { 0.0 };
        }
    }
}

/// Negative adjoint of `gradient`.
fn divergence(p: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let (px, py) = p.split_at(h * w);
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let mut d = 0.0;
            if i + 1 < h {
                d += px[k];
            }
            if i > 0 {
                d -= px[k - w];
            }
            if j + 1 < w {
                d += py[k];
            }
            if j > 0 {
                d -= py[k - 1];
            }
            out[k] = d;
        }
    }
}

pub fn total_variation(x: &Tensor) -> Result<f64> {
    let (h, w) = dims(x)?;
    let mut g = vec![0.0; 2 * h * w];
    gradient(x.data(), h, w, &mut g);
    let n = h * w;
    Ok((0..n).map(|k| g[k].hypot(g[n + k])).sum())
}

pub fn tv_prox(y: &Tensor, strength: f64, tol: f64, max_iter: usize) -> Result<Tensor> {
    Ok(tv_prox_report(y, strength, tol, max_iter)?.solution)
}

pub fn tv_prox_report(y: &Tensor, strength: f64, tol: f64, max_iter: usize) -> Result<TvProxReport> {
    if !(strength >= 0.0) {
        return Err(Error::invalid(format!("TV strength must be >= 0, got {strength}")));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let (h, w) = dims(y)?;
    let n = h * w;
    if strength == 0.0 || n == 0 {
        return Ok(TvProxReport {
            solution: y.clone(),
            iterations: 0,
            primal: 0.0,
            dual: 0.0,
        });
    }
    let yd = y.data();
    let step = 1.0 / (GRAD_NORM_SQ * strength);

    let mut p = vec![0.0; 2 * n];
    let mut p_prev = p.clone();
    let mut r = p.clone();
    let mut t = 1.0_f64;
    let mut div = vec![0.0; n];
    let mut resid = vec![0.0; n];
    let mut grad = vec![0.0; 2 * n];
    let mut iterations = 0;

    for it in 0..max_iter {
        iterations = it + 1;
        divergence(&r, h, w, &mut div);
        for k in 0..n {
            // x(r) = y + strength * div r
            resid[k] = yd[k] + strength * div[k];
        }
        gradient(&resid, h, w, &mut grad);
        std::mem::swap(&mut p_prev, &mut p);
        for k in 0..n {
            let a = r[k] + step * grad[k];
            let b = r[n + k] + step * grad[n + k];
            let scale = a.hypot(b).max(1.0);
            p[k] = a / scale;
            p[n + k] = b / scale;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        let mut change = 0.0;
        let mut size = 0.0;
        for k in 0..2 * n {
            let d = p[k] - p_prev[k];
            change += d * d;
            size += p[k] * p[k];
            r[k] = p[k] + momentum * d;
        }
        t = t_next;
        if change.sqrt() <= tol * size.sqrt().max(1e-12) {
            break;
        }
    }

    divergence(&p, h, w, &mut div);
    let x: Vec<f64> = (0..n).map(|k| yd[k] + strength * div[k]).collect();
    let solution = Tensor::new(y.shape().to_vec(), x)?;
    let fidelity: f64 = 0.5
        * solution
            .data()
            .iter()
            .zip(yd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    let primal = strength * total_variation(&solution)? + fidelity;
    // dual objective 0.5||y||^2 - 0.5||x||^2 at the feasible p
    let dual = 0.5 * y.norm_sq() - 0.5 * solution.norm_sq();
    Ok(TvProxReport {
        solution,
        iterations,
        primal,
        dual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn zero_strength_is_identity() {
        let y = Rng::new(3, 0).normal_tensor(&[6, 5]);
        assert_eq!(tv_prox(&y, 0.0, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap(), y);
    }

    #[test]
    fn constant_image_is_fixed() {
        let y = Tensor::full(&[7, 9], 0.37);
        let x = tv_prox(&y, 2.5, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn negative_strength_rejected() {
        let y = Tensor::zeros(&[3, 3]);
        assert!(tv_prox(&y, -1.0, DEFAULT_TOL, DEFAULT_MAX_ITER).is_err());
    }

    #[test]
    fn divergence_is_negative_adjoint_of_gradient() {
        let mut rng = Rng::new(9, 1);
        let (h, w) = (5, 7);
        let x = rng.normal_tensor(&[h * w]);
        let p = rng.normal_tensor(&[2 * h * w]);
        let mut g = vec![0.0; 2 * h * w];
        let mut d = vec![0.0; h * w];
        gradient(x.data(), h, w, &mut g);
        divergence(p.data(), h, w, &mut d);
        let lhs: f64 = g.iter().zip(p.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = -d.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn duality_gap_small_at_defaults() {
        let y = Rng::new(4, 0).uniform_tensor(&[32, 32], 0.0, 1.0);
        let report = tv_prox_report(&y, 0.1, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(report.relative_gap() <= 1e-5, "gap {}", report.relative_gap());
    }
}
