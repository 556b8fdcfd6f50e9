//! Multivariate Gaussian primitives.
//!
//! Sampling draws standard normals in coordinate order and maps them through
//! the Cholesky factor, so a fixed RNG stream yields a fixed sample sequence
//! regardless of platform.

use nalgebra::{Cholesky, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Matrix, Result, Vector};

const LN_2PI: f64 = 1.8378770664093453;

/// A dense multivariate normal with precomputed Cholesky factor.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: Vector,
    cov: Matrix,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl Gaussian {
    /// Build from mean and covariance. Fails if the covariance is not
    /// symmetric positive definite.
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "gaussian covariance",
                expected: d,
                got: cov.nrows(),
            });
        }
        let max_asym = (&cov - cov.transpose()).abs().max();
        let scale = cov.abs().max().max(1.0);
        if max_asym > 1e-8 * scale {
            return Err(Error::NotSymmetric {
                max_asymmetry: max_asym,
            });
        }
        let chol = Cholesky::new(cov.clone()).ok_or(Error::NotPositiveDefinite)?;
        let log_det: f64 = (0..d).map(|j| chol.l_dirty()[(j, j)].ln()).sum::<f64>() * 2.0;
        let log_norm = -0.5 * (d as f64 * LN_2PI + log_det);
        Ok(Self {
            mean,
            cov,
            chol,
            log_norm,
        })
    }

    /// Isotropic normal `N(mean, variance * I)`.
    pub fn isotropic(mean: Vector, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, Matrix::identity(d, d) * variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    /// Log density at `x`.
    pub fn log_density(&self, x: &Vector) -> f64 {
        let resid = x - &self.mean;
        // Solve L y = resid; the quadratic form is then |y|^2.
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&resid)
            .expect("cholesky factor is non-singular");
        self.log_norm - 0.5 * y.norm_squared()
    }

    /// Draw one sample: `mean + L z` with `z` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let z = Vector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        &self.mean + self.chol.l_dirty().lower_triangle() * z
    }
}

/// The conditional law of one Gaussian block given another:
/// `second | first = a  ~  N(mean_second + R (a - mean_first), noise_cov)`.
///
/// `R` is the regression matrix `Σ_21 Σ_11⁻¹`; the noise covariance is the
/// Schur complement and does not depend on the conditioning point.
#[derive(Debug, Clone)]
pub struct ConditionalGaussian {
    mean_first: Vector,
    mean_second: Vector,
    regression: Matrix,
    noise: Gaussian,
}

impl ConditionalGaussian {
    pub fn new(
        mean_first: Vector,
        mean_second: Vector,
        regression: Matrix,
        noise_cov: Matrix,
    ) -> Result<Self> {
        let noise = Gaussian::new(Vector::zeros(mean_second.len()), noise_cov)?;
        if regression.nrows() != mean_second.len() || regression.ncols() != mean_first.len() {
            return Err(Error::DimensionMismatch {
                context: "conditional regression matrix",
                expected: mean_second.len(),
                got: regression.nrows(),
            });
        }
        Ok(Self {
            mean_first,
            mean_second,
            regression,
            noise,
        })
    }

    /// Dimension of the conditioned (second) block.
    pub fn dim(&self) -> usize {
        self.mean_second.len()
    }

    /// Conditional mean given the first block's value.
    pub fn mean_given(&self, first: &Vector) -> Vector {
        &self.mean_second + &self.regression * (first - &self.mean_first)
    }

    /// Covariance of the conditional (constant in the conditioning point).
    pub fn cov(&self) -> &Matrix {
        self.noise.cov()
    }

    pub fn log_density(&self, first: &Vector, second: &Vector) -> f64 {
        let centered = second - self.mean_given(first);
        self.noise.log_density(&centered)
    }

    pub fn sample<R: Rng + ?Sized>(&self, first: &Vector, rng: &mut R) -> Vector {
        self.mean_given(first) + self.noise.sample(rng)
    }
}
