//! Inference targets.
//!
//! Every model bundles a Gaussian prior with a tempered likelihood
//! `l_{1:t}`: either cumulative data blocks (data-point tempering) or a
//! fractional power of the full likelihood (annealing). Stage `0` is the
//! empty product, stage `T` the full likelihood.
//!
//! The concrete targets are the benchmark problems used throughout:
//!
//! - `plane`: `y ~ N(Σ_k θ_k, 1)`, a linear ridge; conjugate, so exact
//!   posterior quantities are available.
//! - `banana`: `y ~ N(Σ_k θ_k + b Σ_{j≤k*} θ_j², 1)`, the same ridge with a
//!   quadratic bend in the first `k*` coordinates.
//! - mixture: `y ~ ½ N(θ₁+θ₂, 1) + ½ N(θ₃+θ₄, 1)`, a bimodal 4-d target.
//! - conjugate Gaussian: `y ~ N(cᵀθ, σ²)` with closed-form posterior and
//!   marginal likelihood, used as an oracle in tests.

use rand::Rng;
use rand_distr::StandardNormal;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::gaussian::Gaussian;
use crate::{Error, Matrix, Result, Vector};

const LN_2PI: f64 = 1.8378770664093453;

/// How the likelihood is broken into a sequence of `T` stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tempering {
    /// Cumulative blocks of data points; stage `t` covers the first
    /// `min(n, t * ceil(n/T))` observations.
    DataBlocks,
    /// `l^{t/T}`: fractional powers of the full likelihood.
    Annealing,
}

/// Number of observations covered by stage `t` under data-block tempering.
pub fn stage_data_count(n_data: usize, num_stages: usize, t: usize) -> usize {
    if num_stages == 0 {
        return n_data;
    }
    let block = n_data.div_ceil(num_stages);
    (t * block).min(n_data)
}

/// A posterior target: Gaussian prior plus tempered likelihood.
pub trait TargetModel {
    fn dim(&self) -> usize;

    fn prior(&self) -> &Gaussian;

    /// Number of tempering stages `T`.
    fn num_stages(&self) -> usize;

    /// `log l_{1:t}(θ)` for `0 <= t <= T`. Stage 0 is identically zero;
    /// stage `T` is the full log-likelihood.
    fn log_likelihood_cumulative(&self, theta: &Vector, stage: usize) -> f64;

    /// Full log-likelihood.
    fn log_likelihood(&self, theta: &Vector) -> f64 {
        self.log_likelihood_cumulative(theta, self.num_stages())
    }

    /// Gradient of the full log-likelihood. The default is a central
    /// finite-difference fallback with step `1e-5 * (1 + |θ_j|)`; models
    /// with analytic gradients override it.
    fn grad_log_likelihood(&self, theta: &Vector) -> Vector {
        let mut grad = Vector::zeros(self.dim());
        let mut probe = theta.clone();
        for j in 0..self.dim() {
            let h = 1e-5 * (1.0 + theta[j].abs());
            probe[j] = theta[j] + h;
            let up = self.log_likelihood(&probe);
            probe[j] = theta[j] - h;
            let down = self.log_likelihood(&probe);
            probe[j] = theta[j];
            grad[j] = (up - down) / (2.0 * h);
        }
        grad
    }
}

/// Counts likelihood evaluations made through it. Samplers wrap their model
/// so the reported budget is the number of `log_likelihood_cumulative`
/// calls, matching the evaluation-count convention of the experiments.
pub struct EvalCounter<'a> {
    inner: &'a dyn TargetModel,
    count: std::cell::Cell<u64>,
}

impl<'a> EvalCounter<'a> {
    pub fn new(inner: &'a dyn TargetModel) -> Self {
        Self {
            inner,
            count: std::cell::Cell::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.get()
    }
}

impl TargetModel for EvalCounter<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn prior(&self) -> &Gaussian {
        self.inner.prior()
    }
    fn num_stages(&self) -> usize {
        self.inner.num_stages()
    }
    fn log_likelihood_cumulative(&self, theta: &Vector, stage: usize) -> f64 {
        self.count.set(self.count.get() + 1);
        self.inner.log_likelihood_cumulative(theta, stage)
    }
    fn grad_log_likelihood(&self, theta: &Vector) -> Vector {
        self.inner.grad_log_likelihood(theta)
    }
}

/// Prefix sums of observations and their squares, for O(1) Gaussian
/// block log-likelihoods: Σ_{j<c} (y_j - s)² = sq[c] - 2 s sum[c] + c s².
#[derive(Debug, Clone)]
struct GaussianObsSums {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl GaussianObsSums {
    fn new(data: &[f64]) -> Self {
        let mut sum = Vec::with_capacity(data.len() + 1);
        let mut sum_sq = Vec::with_capacity(data.len() + 1);
        sum.push(0.0);
        sum_sq.push(0.0);
        for &y in data {
            sum.push(sum.last().unwrap() + y);
            sum_sq.push(sum_sq.last().unwrap() + y * y);
        }
        Self { sum, sum_sq }
    }

    /// `Σ_{j<count} log N(y_j | mean, variance)`
    fn block_log_density(&self, count: usize, mean: f64, variance: f64) -> f64 {
        let n = count as f64;
        let sse = self.sum_sq[count] - 2.0 * mean * self.sum[count] + n * mean * mean;
        -0.5 * sse / variance - 0.5 * n * (LN_2PI + variance.ln())
    }

    fn total(&self) -> f64 {
        *self.sum.last().unwrap()
    }
}

fn cumulative_gaussian_loglik(
    sums: &GaussianObsSums,
    n_data: usize,
    tempering: Tempering,
    num_stages: usize,
    stage: usize,
    mean: f64,
    variance: f64,
) -> f64 {
    match tempering {
        Tempering::DataBlocks => {
            let count = stage_data_count(n_data, num_stages, stage);
            sums.block_log_density(count, mean, variance)
        }
        Tempering::Annealing => {
            let eta = stage as f64 / num_stages as f64;
            eta * sums.block_log_density(n_data, mean, variance)
        }
    }
}

/// `y ~ N(Σ_k θ_k, 1)` with isotropic Gaussian prior.
#[derive(Debug, Clone)]
pub struct PlaneModel {
    prior: Gaussian,
    data: Vec<f64>,
    sums: GaussianObsSums,
    tempering: Tempering,
    num_stages: usize,
}

impl PlaneModel {
    pub fn new(
        dim: usize,
        prior_variance: f64,
        data: Vec<f64>,
        num_stages: usize,
        tempering: Tempering,
    ) -> Result<Self> {
        if dim == 0 || num_stages == 0 {
            return Err(Error::InvalidArgument(
                "plane model needs dim >= 1 and at least one stage".into(),
            ));
        }
        let prior = Gaussian::isotropic(Vector::zeros(dim), prior_variance)?;
        let sums = GaussianObsSums::new(&data);
        Ok(Self {
            prior,
            data,
            sums,
            tempering,
            num_stages,
        })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

impl TargetModel for PlaneModel {
    fn dim(&self) -> usize {
        self.prior.dim()
    }
    fn prior(&self) -> &Gaussian {
        &self.prior
    }
    fn num_stages(&self) -> usize {
        self.num_stages
    }

    fn log_likelihood_cumulative(&self, theta: &Vector, stage: usize) -> f64 {
        let s = theta.sum();
        cumulative_gaussian_loglik(
            &self.sums,
            self.data.len(),
            self.tempering,
            self.num_stages,
            stage,
            s,
            1.0,
        )
    }

    fn grad_log_likelihood(&self, theta: &Vector) -> Vector {
        let s = theta.sum();
        let resid = self.sums.total() - self.data.len() as f64 * s;
        Vector::from_element(self.dim(), resid)
    }
}

/// `y ~ N(Σ_k θ_k + b Σ_{j≤k*} θ_j², 1)`; reduces to `PlaneModel` at `b = 0`.
#[derive(Debug, Clone)]
pub struct BananaModel {
    prior: Gaussian,
    data: Vec<f64>,
    sums: GaussianObsSums,
    curvature_count: usize,
    curvature_coeff: f64,
    tempering: Tempering,
    num_stages: usize,
}

impl BananaModel {
    pub fn new(
        dim: usize,
        curvature_count: usize,
        curvature_coeff: f64,
        prior_variance: f64,
        data: Vec<f64>,
        num_stages: usize,
        tempering: Tempering,
    ) -> Result<Self> {
        if curvature_count > dim {
            return Err(Error::InvalidArgument(format!(
                "curvature count {curvature_count} exceeds dimension {dim}"
            )));
        }
        if dim == 0 || num_stages == 0 {
            return Err(Error::InvalidArgument(
                "banana model needs dim >= 1 and at least one stage".into(),
            ));
        }
        let prior = Gaussian::isotropic(Vector::zeros(dim), prior_variance)?;
        let sums = GaussianObsSums::new(&data);
        Ok(Self {
            prior,
            data,
            sums,
            curvature_count,
            curvature_coeff,
            tempering,
            num_stages,
        })
    }

    fn likelihood_mean(&self, theta: &Vector) -> f64 {
        let quad: f64 = theta
            .iter()
            .take(self.curvature_count)
            .map(|&x| x * x)
            .sum();
        theta.sum() + self.curvature_coeff * quad
    }
}

impl TargetModel for BananaModel {
    fn dim(&self) -> usize {
        self.prior.dim()
    }
    fn prior(&self) -> &Gaussian {
        &self.prior
    }
    fn num_stages(&self) -> usize {
        self.num_stages
    }

    fn log_likelihood_cumulative(&self, theta: &Vector, stage: usize) -> f64 {
        let s = self.likelihood_mean(theta);
        cumulative_gaussian_loglik(
            &self.sums,
            self.data.len(),
            self.tempering,
            self.num_stages,
            stage,
            s,
            1.0,
        )
    }

    fn grad_log_likelihood(&self, theta: &Vector) -> Vector {
        let s = self.likelihood_mean(theta);
        let resid = self.sums.total() - self.data.len() as f64 * s;
        Vector::from_fn(self.dim(), |j, _| {
            if j < self.curvature_count {
                resid * (1.0 + 2.0 * self.curvature_coeff * theta[j])
            } else {
                resid
            }
        })
    }
}

/// `y ~ ½ N(θ₁+θ₂, 1) + ½ N(θ₃+θ₄, 1)`, exchangeable in the two components.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    prior: Gaussian,
    data: Vec<f64>,
    tempering: Tempering,
    num_stages: usize,
}

impl MixtureModel {
    pub const DIM: usize = 4;

    pub fn new(
        prior_variance: f64,
        data: Vec<f64>,
        num_stages: usize,
        tempering: Tempering,
    ) -> Result<Self> {
        if num_stages == 0 {
            return Err(Error::InvalidArgument("mixture model needs a stage".into()));
        }
        let prior = Gaussian::isotropic(Vector::zeros(Self::DIM), prior_variance)?;
        Ok(Self {
            prior,
            data,
            tempering,
            num_stages,
        })
    }

    fn point_log_density(m1: f64, m2: f64, y: f64) -> f64 {
        let l1 = -0.5 * (y - m1) * (y - m1) - 0.5 * LN_2PI;
        let l2 = -0.5 * (y - m2) * (y - m2) - 0.5 * LN_2PI;
        // log(½ e^l1 + ½ e^l2), max-shifted
        let m = l1.max(l2);
        m + ((l1 - m).exp() + (l2 - m).exp()).ln() - std::f64::consts::LN_2
    }

    fn full_log_density_upto(&self, theta: &Vector, count: usize) -> f64 {
        let m1 = theta[0] + theta[1];
        let m2 = theta[2] + theta[3];
        self.data[..count]
            .iter()
            .map(|&y| Self::point_log_density(m1, m2, y))
            .sum()
    }
}

impl TargetModel for MixtureModel {
    fn dim(&self) -> usize {
        Self::DIM
    }
    fn prior(&self) -> &Gaussian {
        &self.prior
    }
    fn num_stages(&self) -> usize {
        self.num_stages
    }

    fn log_likelihood_cumulative(&self, theta: &Vector, stage: usize) -> f64 {
        match self.tempering {
            Tempering::DataBlocks => {
                let count = stage_data_count(self.data.len(), self.num_stages, stage);
                self.full_log_density_upto(theta, count)
            }
            Tempering::Annealing => {
                let eta = stage as f64 / self.num_stages as f64;
                eta * self.full_log_density_upto(theta, self.data.len())
            }
        }
    }

    fn grad_log_likelihood(&self, theta: &Vector) -> Vector {
        let m1 = theta[0] + theta[1];
        let m2 = theta[2] + theta[3];
        let mut g1 = 0.0;
        let mut g2 = 0.0;
        for &y in &self.data {
            let l1 = -0.5 * (y - m1) * (y - m1);
            let l2 = -0.5 * (y - m2) * (y - m2);
            // responsibilities of the two (equal-weight) components
            let m = l1.max(l2);
            let e1 = (l1 - m).exp();
            let e2 = (l2 - m).exp();
            let r1 = e1 / (e1 + e2);
            let r2 = e2 / (e1 + e2);
            g1 += r1 * (y - m1);
            g2 += r2 * (y - m2);
        }
        Vector::from_vec(vec![g1, g1, g2, g2])
    }
}

/// `y ~ N(cᵀθ, σ²)` with Gaussian prior: closed-form posterior and marginal
/// likelihood. The oracle model for estimator and sampler tests.
#[derive(Debug, Clone)]
pub struct ConjugateGaussianModel {
    prior: Gaussian,
    design: Vector,
    noise_variance: f64,
    data: Vec<f64>,
    sums: GaussianObsSums,
    tempering: Tempering,
    num_stages: usize,
}

impl ConjugateGaussianModel {
    pub fn new(
        prior: Gaussian,
        design: Vector,
        noise_variance: f64,
        data: Vec<f64>,
        num_stages: usize,
        tempering: Tempering,
    ) -> Result<Self> {
        if design.len() != prior.dim() {
            return Err(Error::DimensionMismatch {
                context: "conjugate design vector",
                expected: prior.dim(),
                got: design.len(),
            });
        }
        if noise_variance <= 0.0 || num_stages == 0 {
            return Err(Error::InvalidArgument(
                "conjugate model needs positive noise variance and a stage".into(),
            ));
        }
        let sums = GaussianObsSums::new(&data);
        Ok(Self {
            prior,
            design,
            noise_variance,
            data,
            sums,
            tempering,
            num_stages,
        })
    }

    pub fn design(&self) -> &Vector {
        &self.design
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Exact posterior `N(μ_post, Σ_post)` by Gaussian conjugacy.
    pub fn posterior(&self) -> Result<Gaussian> {
        let d = self.prior.dim();
        let n = self.data.len() as f64;
        let prior_prec = self
            .prior
            .cov()
            .clone()
            .try_inverse()
            .ok_or(Error::NotPositiveDefinite)?;
        let precision =
            &prior_prec + (&self.design * self.design.transpose()) * (n / self.noise_variance);
        let rhs =
            &prior_prec * self.prior.mean() + &self.design * (self.sums.total() / self.noise_variance);
        let cov = precision.try_inverse().ok_or(Error::NotPositiveDefinite)?;
        let cov = (&cov + cov.transpose()) * 0.5;
        let mean = &cov * rhs;
        Gaussian::new(mean, Matrix::from_iterator(d, d, cov.iter().copied()))
    }

    /// Exact `log ∫ p(θ) l(θ) dθ`.
    ///
    /// With `v = cᵀ Σ₀ c`, the data are jointly `N(cᵀμ₀ · 1, σ²I + v J)`;
    /// the Sherman-Morrison identity gives the quadratic form and
    /// determinant without forming the n×n matrix.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.data.len() as f64;
        let v = (self.design.transpose() * self.prior.cov() * &self.design)[(0, 0)];
        let m0 = self.design.dot(self.prior.mean());
        let resid_sq = self.sums.sum_sq[self.data.len()]
            - 2.0 * m0 * self.sums.total()
            + n * m0 * m0;
        let resid_sum = self.sums.total() - n * m0;
        let s2 = self.noise_variance;
        let quad = resid_sq / s2 - v * resid_sum * resid_sum / (s2 * (s2 + n * v));
        let log_det = (n - 1.0) * s2.ln() + (s2 + n * v).ln();
        -0.5 * (n * LN_2PI + log_det + quad)
    }
}

impl TargetModel for ConjugateGaussianModel {
    fn dim(&self) -> usize {
        self.prior.dim()
    }
    fn prior(&self) -> &Gaussian {
        &self.prior
    }
    fn num_stages(&self) -> usize {
        self.num_stages
    }

    fn log_likelihood_cumulative(&self, theta: &Vector, stage: usize) -> f64 {
        let s = self.design.dot(theta);
        cumulative_gaussian_loglik(
            &self.sums,
            self.data.len(),
            self.tempering,
            self.num_stages,
            stage,
            s,
            self.noise_variance,
        )
    }

    fn grad_log_likelihood(&self, theta: &Vector) -> Vector {
        let s = self.design.dot(theta);
        let resid = self.sums.total() - self.data.len() as f64 * s;
        &self.design * (resid / self.noise_variance)
    }
}

/// Draw `n` observations from `N(mean, sd²)`.
pub fn sample_gaussian_observations<R: Rng + ?Sized>(
    n: usize,
    mean: f64,
    sd: f64,
    rng: &mut R,
) -> Vec<f64> {
    (0..n)
        .map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Draw `n` observations from `½ N(c₁, sd²) + ½ N(c₂, sd²)`.
pub fn sample_mixture_observations<R: Rng + ?Sized>(
    n: usize,
    centers: (f64, f64),
    sd: f64,
    rng: &mut R,
) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let c = if rng.random::<bool>() {
                centers.0
            } else {
                centers.1
            };
            c + sd * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

/// Write a dataset as plain text, one observation per line. The shortest
/// round-trip decimal representation is used, so reading back is exact.
pub fn write_dataset<W: Write>(mut w: W, data: &[f64]) -> Result<()> {
    for y in data {
        writeln!(w, "{y}")?;
    }
    Ok(())
}

pub fn write_dataset_file<P: AsRef<Path>>(path: P, data: &[f64]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_dataset(std::io::BufWriter::new(f), data)
}

/// Parse a plain-text dataset: one finite decimal number per line, blank
/// lines and `#` comments ignored.
pub fn read_dataset<R: std::io::Read>(r: R) -> Result<Vec<f64>> {
    let mut data = Vec::new();
    for (lineno, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let value: f64 = trimmed
            .parse()
            .map_err(|e| Error::Parse(format!("dataset line {}: {e}", lineno + 1)))?;
        if !value.is_finite() {
            return Err(Error::Parse(format!(
                "dataset line {}: non-finite value",
                lineno + 1
            )));
        }
        data.push(value);
    }
    Ok(data)
}

pub fn read_dataset_file<P: AsRef<Path>>(path: P) -> Result<Vec<f64>> {
    read_dataset(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::RngStream;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn small_plane() -> PlaneModel {
        PlaneModel::new(2, 5000.0, vec![1.0, -1.0], 1, Tempering::DataBlocks).unwrap()
    }

    #[test]
    fn stage_boundaries_use_ceil_blocks() {
        // 100 points in 6 stages: blocks of 17, final block of 15.
        let counts: Vec<usize> = (0..=6).map(|t| stage_data_count(100, 6, t)).collect();
        assert_eq!(counts, vec![0, 17, 34, 51, 68, 85, 100]);
    }

    #[test]
    fn plane_stage_zero_is_empty_product() {
        let m = PlaneModel::new(3, 5000.0, vec![0.5, -0.2], 2, Tempering::DataBlocks).unwrap();
        assert_eq!(m.log_likelihood_cumulative(&dvector![1.0, 2.0, 3.0], 0), 0.0);
    }

    #[test]
    fn plane_single_standard_datum_at_mode() {
        let m = PlaneModel::new(1, 5000.0, vec![0.0], 1, Tempering::DataBlocks).unwrap();
        assert_relative_eq!(
            m.log_likelihood(&dvector![0.0]),
            -0.5 * LN_2PI,
            epsilon = 1e-14
        );
    }

    #[test]
    fn plane_hand_evaluated_sum() {
        // d=2, y=(1,-1), θ=(0.5,-0.5): mean 0, Σ log N(y_j|0,1) = -log 2π - 1.
        let m = small_plane();
        assert_relative_eq!(
            m.log_likelihood(&dvector![0.5, -0.5]),
            -LN_2PI - 1.0,
            epsilon = 1e-13
        );
    }

    #[test]
    fn banana_reduces_to_plane_at_zero_curvature() {
        let data = vec![0.3, -0.8, 1.4, 0.1];
        let plane = PlaneModel::new(3, 5000.0, data.clone(), 2, Tempering::DataBlocks).unwrap();
        let banana =
            BananaModel::new(3, 2, 0.0, 5000.0, data, 2, Tempering::DataBlocks).unwrap();
        let theta = dvector![0.7, -1.2, 0.4];
        for t in 0..=2 {
            assert_eq!(
                plane.log_likelihood_cumulative(&theta, t),
                banana.log_likelihood_cumulative(&theta, t)
            );
        }
        assert_eq!(
            plane.grad_log_likelihood(&theta),
            banana.grad_log_likelihood(&theta)
        );
    }

    #[test]
    fn banana_vanishing_quadratic_at_origin() {
        let data = vec![0.3, -0.8];
        let plane = PlaneModel::new(2, 5000.0, data.clone(), 1, Tempering::DataBlocks).unwrap();
        let banana =
            BananaModel::new(2, 1, 0.001, 5000.0, data, 1, Tempering::DataBlocks).unwrap();
        let origin = dvector![0.0, 0.0];
        assert_eq!(
            plane.log_likelihood(&origin),
            banana.log_likelihood(&origin)
        );
    }

    #[test]
    fn banana_hand_evaluated_mean() {
        // d=2, k=1, b=0.001, θ=(10,-10): mean = 0 + 0.001*100 = 0.1.
        let data = vec![0.4, -0.2, 1.1];
        let banana =
            BananaModel::new(2, 1, 0.001, 5000.0, data.clone(), 1, Tempering::DataBlocks)
                .unwrap();
        let expect: f64 = data
            .iter()
            .map(|&y| -0.5 * (y - 0.1) * (y - 0.1) - 0.5 * LN_2PI)
            .sum();
        assert_relative_eq!(
            banana.log_likelihood(&dvector![10.0, -10.0]),
            expect,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mixture_collapsed_means_equal_standard_normal() {
        let data = vec![0.5, -1.0, 2.0];
        let m = MixtureModel::new(25.0, data.clone(), 1, Tempering::DataBlocks).unwrap();
        // θ = (α, -α, β, -β): both component means are 0.
        let v = m.log_likelihood(&dvector![3.0, -3.0, -7.0, 7.0]);
        let expect: f64 = data.iter().map(|&y| -0.5 * y * y - 0.5 * LN_2PI).sum();
        assert_relative_eq!(v, expect, epsilon = 1e-12);
    }

    #[test]
    fn mixture_component_swap_symmetry() {
        let data = vec![4.2, -5.1, 0.3];
        let m = MixtureModel::new(25.0, data, 3, Tempering::DataBlocks).unwrap();
        for t in 0..=3 {
            assert_eq!(
                m.log_likelihood_cumulative(&dvector![1.0, 2.0, 3.0, 4.0], t),
                m.log_likelihood_cumulative(&dvector![3.0, 4.0, 1.0, 2.0], t)
            );
        }
    }

    #[test]
    fn mixture_single_datum_hand_value() {
        // y=5, θ=(2,3,-2,-3): log(½N(5|5,1) + ½N(5|-5,1))
        let m = MixtureModel::new(25.0, vec![5.0], 1, Tempering::DataBlocks).unwrap();
        let l1 = -0.5 * LN_2PI; // N(5|5,1)
        let l2 = -0.5 * 100.0 - 0.5 * LN_2PI; // N(5|-5,1)
        let expect = (0.5 * l1.exp() + 0.5 * l2.exp()).ln();
        assert_relative_eq!(
            m.log_likelihood(&dvector![2.0, 3.0, -2.0, -3.0]),
            expect,
            epsilon = 1e-12
        );
    }

    #[test]
    fn tempering_telescopes_for_all_models() {
        let mut rng = RngStream::new(5, 0).rng();
        let data = sample_gaussian_observations(20, 0.0, 1.0, &mut rng);
        let models: Vec<Box<dyn TargetModel>> = vec![
            Box::new(PlaneModel::new(3, 5000.0, data.clone(), 4, Tempering::DataBlocks).unwrap()),
            Box::new(
                BananaModel::new(3, 2, 0.001, 5000.0, data.clone(), 4, Tempering::DataBlocks)
                    .unwrap(),
            ),
            Box::new(MixtureModel::new(25.0, data.clone(), 4, Tempering::DataBlocks).unwrap()),
            Box::new(PlaneModel::new(3, 5000.0, data.clone(), 4, Tempering::Annealing).unwrap()),
        ];
        // Points with moderate likelihood mean, where absolute tolerances
        // are meaningful; full-prior-scale values are checked relatively.
        for m in &models {
            let theta = Vector::from_fn(m.dim(), |j, _| 0.2 - 0.1 * j as f64);
            let total = m.log_likelihood(&theta);
            let mut acc = 0.0;
            for t in 1..=m.num_stages() {
                let inc = m.log_likelihood_cumulative(&theta, t)
                    - m.log_likelihood_cumulative(&theta, t - 1);
                acc += inc;
            }
            assert_relative_eq!(acc, total, epsilon = 1e-10, max_relative = 1e-12);
            assert_eq!(m.log_likelihood_cumulative(&theta, 0), 0.0);
            assert_eq!(m.log_likelihood_cumulative(&theta, m.num_stages()), total);
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = RngStream::new(11, 0).rng();
        let data = sample_gaussian_observations(15, 0.0, 1.0, &mut rng);
        struct Fd<'a>(&'a dyn TargetModel);
        impl TargetModel for Fd<'_> {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn prior(&self) -> &Gaussian {
                self.0.prior()
            }
            fn num_stages(&self) -> usize {
                self.0.num_stages()
            }
            fn log_likelihood_cumulative(&self, theta: &Vector, stage: usize) -> f64 {
                self.0.log_likelihood_cumulative(theta, stage)
            }
            // no override: default finite differences
        }
        let models: Vec<Box<dyn TargetModel>> = vec![
            Box::new(PlaneModel::new(4, 5000.0, data.clone(), 1, Tempering::DataBlocks).unwrap()),
            Box::new(
                BananaModel::new(4, 2, 0.001, 5000.0, data.clone(), 1, Tempering::DataBlocks)
                    .unwrap(),
            ),
            Box::new(MixtureModel::new(25.0, data.clone(), 1, Tempering::DataBlocks).unwrap()),
            Box::new(
                ConjugateGaussianModel::new(
                    Gaussian::isotropic(Vector::zeros(4), 9.0).unwrap(),
                    dvector![1.0, -0.5, 2.0, 0.25],
                    1.5,
                    data.clone(),
                    1,
                    Tempering::DataBlocks,
                )
                .unwrap(),
            ),
        ];
        for m in &models {
            for _ in 0..20 {
                let theta = Vector::from_fn(m.dim(), |_, _| {
                    2.0 * rng.sample::<f64, _>(StandardNormal)
                });
                let analytic = m.grad_log_likelihood(&theta);
                let numeric = Fd(m.as_ref()).grad_log_likelihood(&theta);
                for j in 0..m.dim() {
                    let scale = analytic[j].abs().max(1.0);
                    assert!(
                        (analytic[j] - numeric[j]).abs() / scale < 1e-4,
                        "gradient mismatch at coord {j}: {} vs {}",
                        analytic[j],
                        numeric[j]
                    );
                }
            }
        }
    }

    #[test]
    fn plane_score_zero_at_fitted_mean() {
        let m = small_plane();
        // Σ y = 0, so any θ with Σθ = 0 has zero residual sum.
        let g = m.grad_log_likelihood(&dvector![0.7, -0.7]);
        assert_relative_eq!(g[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(g[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn conjugate_marginal_matches_quadrature() {
        // d=1, prior N(0,1), c=1, noise 1, single y: marginal = N(y | 0, 2).
        let m = ConjugateGaussianModel::new(
            Gaussian::isotropic(dvector![0.0], 1.0).unwrap(),
            dvector![1.0],
            1.0,
            vec![0.7],
            1,
            Tempering::DataBlocks,
        )
        .unwrap();
        let expect = -0.5 * (LN_2PI + 2.0_f64.ln()) - 0.5 * 0.7 * 0.7 / 2.0;
        assert_relative_eq!(m.log_marginal_likelihood(), expect, epsilon = 1e-12);

        // Same value by brute-force 1-d quadrature over θ.
        let mut acc: Vec<f64> = Vec::new();
        let (lo, hi, steps) = (-12.0, 12.0, 40_000);
        let h = (hi - lo) / steps as f64;
        for k in 0..=steps {
            let theta = dvector![lo + k as f64 * h];
            let v = m.prior().log_density(&theta) + m.log_likelihood(&theta);
            let w: f64 = if k == 0 || k == steps { 0.5 } else { 1.0 };
            acc.push(v + w.ln());
        }
        let quad = crate::weights::log_sum_exp(&acc) + h.ln();
        assert_relative_eq!(m.log_marginal_likelihood(), quad, epsilon = 1e-8);
    }

    #[test]
    fn conjugate_marginal_parameter_free_likelihood() {
        // c = 0: marginal is Π_j N(y_j | 0, σ²) exactly.
        let data = vec![0.4, -1.3, 0.9];
        let m = ConjugateGaussianModel::new(
            Gaussian::isotropic(dvector![0.0, 0.0], 3.0).unwrap(),
            dvector![0.0, 0.0],
            2.0,
            data.clone(),
            1,
            Tempering::DataBlocks,
        )
        .unwrap();
        let expect: f64 = data
            .iter()
            .map(|&y| -0.5 * y * y / 2.0 - 0.5 * (LN_2PI + 2.0_f64.ln()))
            .sum();
        assert_relative_eq!(m.log_marginal_likelihood(), expect, epsilon = 1e-12);
    }

    #[test]
    fn conjugate_marginal_sign_symmetry() {
        let data = vec![0.4, -1.3, 0.9];
        let flipped: Vec<f64> = data.iter().map(|y| -y).collect();
        let build = |d: Vec<f64>| {
            ConjugateGaussianModel::new(
                Gaussian::isotropic(dvector![0.0, 0.0], 4.0).unwrap(),
                dvector![1.0, 0.5],
                1.0,
                d,
                1,
                Tempering::DataBlocks,
            )
            .unwrap()
        };
        assert_relative_eq!(
            build(data).log_marginal_likelihood(),
            build(flipped).log_marginal_likelihood(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn conjugate_posterior_matches_plane() {
        // The plane model is the conjugate model with c = 1_d.
        let mut rng = RngStream::new(3, 0).rng();
        let data = sample_gaussian_observations(30, 0.0, 1.0, &mut rng);
        let plane = PlaneModel::new(3, 5000.0, data.clone(), 1, Tempering::DataBlocks).unwrap();
        let conj = ConjugateGaussianModel::new(
            Gaussian::isotropic(Vector::zeros(3), 5000.0).unwrap(),
            Vector::from_element(3, 1.0),
            1.0,
            data,
            1,
            Tempering::DataBlocks,
        )
        .unwrap();
        let theta = dvector![0.3, -0.2, 0.1];
        assert_relative_eq!(
            plane.log_likelihood(&theta),
            conj.log_likelihood(&theta),
            epsilon = 1e-10
        );
        let post = conj.posterior().unwrap();
        // Posterior mean lies near ȳ/d per coordinate for a flat-ish prior.
        let ybar = conj.data().iter().sum::<f64>() / conj.data().len() as f64;
        for j in 0..3 {
            assert_relative_eq!(post.mean()[j], ybar / 3.0, epsilon = 1e-2);
        }
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let mut rng = RngStream::new(8, 0).rng();
        let data = sample_gaussian_observations(64, 0.0, 1.0, &mut rng);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        let back = read_dataset(&buf[..]).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn dataset_generation_reproducible() {
        let a = sample_gaussian_observations(100, 0.0, 1.0, &mut RngStream::new(4, 2).rng());
        let b = sample_gaussian_observations(100, 0.0, 1.0, &mut RngStream::new(4, 2).rng());
        assert_eq!(a, b);
        let m1 = sample_mixture_observations(100, (-5.0, 5.0), 1.0, &mut RngStream::new(4, 3).rng());
        let m2 = sample_mixture_observations(100, (-5.0, 5.0), 1.0, &mut RngStream::new(4, 3).rng());
        assert_eq!(m1, m2);
    }

    #[test]
    fn dataset_parser_rejects_garbage() {
        assert!(read_dataset("1.0\nnot-a-number\n".as_bytes()).is_err());
        assert!(read_dataset("inf\n".as_bytes()).is_err());
        let ok = read_dataset("# comment\n\n1.5\n-2.25\n".as_bytes()).unwrap();
        assert_eq!(ok, vec![1.5, -2.25]);
    }

    #[test]
    fn eval_counter_counts_cumulative_calls() {
        let m = small_plane();
        let counter = EvalCounter::new(&m);
        let theta = dvector![0.1, 0.2];
        counter.log_likelihood(&theta);
        counter.log_likelihood_cumulative(&theta, 1);
        assert_eq!(counter.count(), 2);
    }
}
