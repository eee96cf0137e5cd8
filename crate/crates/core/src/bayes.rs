//! Gaussian signal priors and the Bayes-optimal estimator for noiseless
//! linear measurements.
//!
//! For `x ~ N(mu, Sigma)` and `y = A x`, the conditional mean splits along
//! `Im(A^T) (+) Ker(A)`: the row-space component is fixed by the
//! measurement (`A^+ y`), and the kernel component is the Gaussian
//! regression of the kernel coordinates on the row-space coordinates.
//! [`bayes_estimate`] assembles that decomposition in orthonormal SVD
//! bases; [`gaussian_condition_oracle`] conditions the joint Gaussian of
//! `(x, A x)` directly and serves as an independent cross-check.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::operators::{pinv_apply, FullSvd, LinearOp, RANK_CUTOFF};
use crate::rng::Rng;
use crate::tensor::Tensor;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;
const RANGE_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GaussianPrior {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let n = mu.len();
        if sigma.shape() != (n, n) {
            return Err(Error::shape(format!(
                "covariance {:?} does not match mean of length {n}",
                sigma.shape()
            )));
        }
        let asym = (&sigma - sigma.transpose()).norm();
        if asym > SYMMETRY_TOL * sigma.norm().max(1.0) {
            return Err(Error::NotPsd(format!("covariance not symmetric ({asym:.2e})")));
        }
        if n > 0 {
            let min_eig = sigma.clone().symmetric_eigenvalues().min();
            if min_eig < -PSD_TOL * sigma.norm().max(1.0) {
                return Err(Error::NotPsd(format!("smallest eigenvalue {min_eig:.3e}")));
            }
        }
        Ok(Self { mu, sigma })
    }

    pub fn from_tensors(mu: &Tensor, sigma: &Tensor) -> Result<Self> {
        Self::new(mu.to_dvector(), sigma.to_matrix()?)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Exponential covariance `exp(-d_ij / length)` over an `h x w` pixel grid.
    pub fn exponential_grid(h: usize, w: usize, length: f64, mean: f64) -> Result<Self> {
        let n = h * w;
        let sigma = DMatrix::from_fn(n, n, |a, b| {
            if length <= 0.0 {
                return if a == b { 1.0 } else { 0.0 };
            }
            let (ai, aj) = ((a / w) as f64, (a % w) as f64);
            let (bi, bj) = ((b / w) as f64, (b % w) as f64);
            let d = (ai - bi).hypot(aj - bj);
            (-d / length).exp()
        });
        Self::new(DVector::from_element(n, mean), sigma)
    }
}

/// Draws `count` samples through a Cholesky factor of the covariance.
pub fn sample_prior(prior: &GaussianPrior, count: usize, rng: &mut Rng) -> Result<Vec<Tensor>> {
    let n = prior.dim();
    let trace = prior.sigma.trace();
    let factor = if trace == 0.0 {
        DMatrix::zeros(n, n)
    } else {
        match prior.sigma.clone().cholesky() {
            Some(c) => c.unpack(),
            None => {
                let jitter = 1e-10 * trace / n as f64;
                let jittered = &prior.sigma + DMatrix::identity(n, n) * jitter;
                jittered
                    .cholesky()
                    .ok_or_else(|| Error::NotPsd("covariance not factorizable after jitter".into()))?
                    .unpack()
            }
        }
    };
    Ok((0..count)
        .map(|_| {
            let z = DVector::from_fn(n, |_, _| rng.normal());
            let x = &prior.mu + &factor * z;
            Tensor::from_slice(x.as_slice())
        })
        .collect())
}

/// Orthonormal bases of `Im(A^T)` and `Ker(A)`.
#[derive(Clone, Debug)]
pub struct SubspaceBases {
    /// `n x r`
    pub image: DMatrix<f64>,
    /// `n x (n - r)`
    pub kernel: DMatrix<f64>,
}

impl SubspaceBases {
    pub fn rank(&self) -> usize {
        self.image.ncols()
    }
}

pub fn subspace_bases(op: &LinearOp) -> Result<SubspaceBases> {
    let a = op.materialize()?;
    let svd = FullSvd::new(&a);
    Ok(SubspaceBases {
        image: svd.row_space(),
        kernel: svd.null_space(),
    })
}

fn check_in_range(op: &LinearOp, y: &Tensor, x_pinv: &Tensor) -> Result<()> {
    let resid = crate::tensor::distance(&op.apply(x_pinv)?, y);
    let scale = y.norm();
    if resid > RANGE_TOL * scale.max(f64::MIN_POSITIVE) && resid > 0.0 {
        return Err(Error::OutsideRange(resid / scale.max(f64::MIN_POSITIVE)));
    }
    Ok(())
}

/// Closed-form conditional mean `E[x | A x = y]` assembled on
/// `Im(A^T) (+) Ker(A)`.
pub fn bayes_estimate(prior: &GaussianPrior, op: &LinearOp, y: &Tensor) -> Result<Tensor> {
    let bases = subspace_bases(op)?;
    bayes_estimate_with_bases(prior, op, &bases, y)
}

/// Same as [`bayes_estimate`] with precomputed bases.
pub fn bayes_estimate_with_bases(
    prior: &GaussianPrior,
    op: &LinearOp,
    bases: &SubspaceBases,
    y: &Tensor,
) -> Result<Tensor> {
    if op.input_len() != prior.dim() {
        return Err(Error::shape("prior and operator dimensions differ"));
    }
    let x_pinv = pinv_apply(op, y)?;
    check_in_range(op, y, &x_pinv)?;
    let xp = x_pinv.to_dvector();

    let vi = &bases.image;
    let vk = &bases.kernel;
    let mut x = xp.clone();
    if vk.ncols() > 0 {
        let coords_image = vi.tr_mul(&(&xp - &prior.mu));
        let mu_kernel = vk.tr_mul(&prior.mu);
        let mut kernel_coords = mu_kernel;
        if vi.ncols() > 0 {
            let sigma_ii = vi.transpose() * &prior.sigma * vi;
            let sigma_ki = vk.transpose() * &prior.sigma * vi;
            let solved = solve_spd(&sigma_ii, &coords_image);
            kernel_coords += sigma_ki * solved;
        }
        x += vk * kernel_coords;
    }
    Tensor::from_dvector(&x, op.input_shape())
}

/// The Bayes estimator as an affine map `x_hat = B y + b` of the measurements.
pub fn bayes_affine_map(prior: &GaussianPrior, op: &LinearOp) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if op.input_len() != prior.dim() {
        return Err(Error::shape("prior and operator dimensions differ"));
    }
    let a = op.materialize()?;
    let svd = FullSvd::new(&a);
    let n = op.input_len();
    let m = op.output_len();
    // A^+ column by column
    let mut pinv = DMatrix::zeros(n, m);
    for j in 0..m {
        let mut e = DVector::zeros(m);
        e[j] = 1.0;
        pinv.set_column(j, &svd.pinv_apply(&e));
    }
    let vi = svd.row_space();
    let vk = svd.null_space();
    let mut lift = DMatrix::identity(n, n);
    let mut offset = DVector::zeros(n);
    if vk.ncols() > 0 {
        // kernel coordinates: Vk^T mu + S_KI S_I^-1 Vi^T (x_pinv - mu)
        let mut gain = DMatrix::zeros(vk.ncols(), vi.ncols());
        if vi.ncols() > 0 {
            let sigma_ii = vi.transpose() * &prior.sigma * &vi;
            let sigma_ki = vk.transpose() * &prior.sigma * &vi;
            for k in 0..gain.nrows() {
                let row = solve_spd(&sigma_ii, &sigma_ki.row(k).transpose());
                gain.set_row(k, &row.transpose());
            }
        }
        let kernel_gain = &vk * &gain * vi.transpose();
        lift += &kernel_gain;
        offset = &vk * (vk.tr_mul(&prior.mu)) - kernel_gain * &prior.mu;
    }
    Ok((lift * pinv, offset))
}

/// Solves `S z = b` for symmetric PSD `S`, adding a `1e-12 * trace` ridge when singular.
fn solve_spd(s: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if let Some(chol) = s.clone().cholesky() {
        let z = chol.solve(b);
        if z.iter().all(|v| v.is_finite()) {
            return z;
        }
    }
    let n = s.nrows();
    let ridge = 1e-12 * s.trace().max(f64::MIN_POSITIVE);
    let regularized = s + DMatrix::identity(n, n) * ridge;
    match regularized.clone().cholesky() {
        Some(chol) => chol.solve(b),
        None => regularized.lu().solve(b).unwrap_or_else(|| DVector::zeros(n)),
    }
}

/// Pseudo-inverse of a symmetric PSD matrix with the shared relative cutoff.
fn symmetric_pinv(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = s.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut inv = DMatrix::zeros(s.nrows(), s.ncols());
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if max > 0.0 && lam > RANK_CUTOFF * max {
            let v = eig.eigenvectors.column(k);
            inv += (v * v.transpose()) / lam;
        }
    }
    inv
}

/// Conditional mean of `x` given `A x = y` from the joint Gaussian of `(x, A x)`:
/// `mu + Sigma A^T (A Sigma A^T)^+ (y - A mu)`.
pub fn gaussian_condition_oracle(prior: &GaussianPrior, op: &LinearOp, y: &Tensor) -> Result<Tensor> {
    if op.input_len() != prior.dim() {
        return Err(Error::shape("prior and operator dimensions differ"));
    }
    y.ensure_shape(op.output_shape(), "measurement")?;
    let a = op.materialize()?;
    // range check: y must be reachable by some x
    let aat = &a * a.transpose();
    let proj = &aat * symmetric_pinv(&aat);
    let yv = y.to_dvector();
    let resid = (&proj * &yv - &yv).norm();
    if resid > RANGE_TOL * yv.norm().max(f64::MIN_POSITIVE) && resid > 0.0 {
        return Err(Error::OutsideRange(resid / yv.norm().max(f64::MIN_POSITIVE)));
    }
    let cross = &prior.sigma * a.transpose();
    let cov_y = &a * &cross;
    let innovation = &yv - &a * &prior.mu;
    let x = &prior.mu + cross * (symmetric_pinv(&cov_y) * innovation);
    Tensor::from_dvector(&x, op.input_shape())
}
