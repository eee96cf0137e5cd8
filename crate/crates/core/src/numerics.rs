//! Metrics and numerical test utilities.

use crate::error::{Error, Result};
use crate::operators::LinearOp;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Value reported by [`psnr`] when the reconstruction is (numerically) exact.
pub const PSNR_CAP: f64 = 99.0;

/// Default step for [`finite_diff_grad`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Peak signal-to-noise ratio in decibels, capped at [`PSNR_CAP`].
pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    x.ensure_same_shape(reference, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    let n = x.len().max(1) as f64;
    let mse = crate::tensor::distance(x, reference).powi(2) / n;
    if mse < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("function value at probe {i} is not finite")));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest singular value of `op` by power iteration on `A^T A`.
pub fn spectral_norm(op: &LinearOp, iterations: usize, rng: &mut Rng) -> Result<f64> {
    if iterations == 0 {
        return Err(Error::invalid("spectral_norm needs at least one iteration"));
    }
    let mut v = rng.normal_tensor(op.input_shape());
    let norm = v.norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    v = v.scale(1.0 / norm);
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let w = op.normal(&v)?;
        let wn = w.norm();
        if wn == 0.0 {
            return Ok(0.0);
        }
        // Rayleigh quotient <v, A^T A v> = ||A v||^2 for unit v
        estimate = v.dot(&w).max(0.0).sqrt();
        v = w.scale(1.0 / wn);
    }
    Ok(estimate)
}

/// Relative error `||a - b|| / max(||b||, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    crate::tensor::distance(a, b) / b.norm().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn psnr_examples() {
        let x = Tensor::from_slice(&[0.2, 0.4]);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP);
        let zeros = Tensor::from_slice(&[0.0, 0.0]);
        let ones = Tensor::from_slice(&[1.0, 1.0]);
        assert!(psnr(&zeros, &ones, 1.0).unwrap().abs() < 1e-12);
        let a = Tensor::from_slice(&[0.1, -0.1, 0.1, -0.1]);
        let z = Tensor::zeros(&[4]);
        assert!((psnr(&a, &z, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &z, 0.0).is_err());
        assert!(psnr(&a, &zeros, 1.0).is_err());
    }

    #[test]
    fn fd_on_quadratic_and_constant() {
        let x = Tensor::from_slice(&[3.0, -1.0]);
        let g = finite_diff_grad(|t| 0.5 * t.norm_sq(), &x, DEFAULT_FD_STEP).unwrap();
        assert!((g.data()[0] - 3.0).abs() < 1e-8 && (g.data()[1] + 1.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 4.2, &x, DEFAULT_FD_STEP).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
        let blows_up = |t: &Tensor| if t.data()[0] > 3.0 { f64::NAN } else { 0.0 };
        assert!(finite_diff_grad(blows_up, &x, 1e-5).is_err());
    }

    #[test]
    fn spectral_norm_examples() {
        let mut rng = Rng::new(0, 0);
        let id = LinearOp::identity(&[4]);
        assert!((spectral_norm(&id, 10, &mut rng).unwrap() - 1.0).abs() < 1e-6);

        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0, 0.5]));
        let s = spectral_norm(&LinearOp::from_matrix(d), 100, &mut rng).unwrap();
        assert!((s - 3.0).abs() < 0.03);

        let mask = Tensor::from_slice(&[1.0, 0.0, 1.0, 0.0, 0.0]);
        let s = spectral_norm(&LinearOp::mask(mask).unwrap(), 5, &mut rng).unwrap();
        assert!((s - 1.0).abs() < 1e-6);

        let zero = LinearOp::from_matrix(DMatrix::zeros(3, 3));
        assert_eq!(spectral_norm(&zero, 5, &mut rng).unwrap(), 0.0);
    }
}
