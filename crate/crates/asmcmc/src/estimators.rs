//! Marginal-likelihood estimators over the inactive block, effective sample
//! size, and the posterior-expectation estimators composed from chain
//! output.
//!
//! The importance-sampling estimator is
//! `l̄_a(a) = (1/N_i) Σ_n p_{i|a}(iⁿ|a) l(B_a a + B_i iⁿ) / q_i(iⁿ|a)`
//! with `iⁿ ~ q_i(·|a)`; proposing from the prior conditional reduces it to
//! the plain prior-sample average of the likelihood. The estimator is
//! unbiased in the linear domain, which is what pseudo-marginal MH needs.

use rand::{Rng, RngCore};
use std::io::Write;

use crate::gaussian::ConditionalGaussian;
use crate::models::TargetModel;
use crate::samplers::ChainTrace;
use crate::subspace::{factorize_gaussian_prior, split_from_matrix, PriorFactorization, SubspaceSplit};
use crate::weights::{check_normalized, normalize_log_weights};
use crate::{Error, Matrix, Result, RngStream, Vector};

/// Particles with log-domain weights, their normalised form, and the
/// per-stage normalising increments accumulated while building them.
/// Points are stored in full parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedParticleSet {
    pub points: Vec<Vector>,
    pub log_weights: Vec<f64>,
    pub normalized: Vec<f64>,
    pub log_z_increments: Vec<f64>,
}

impl WeightedParticleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One estimate of the marginal likelihood of the active coordinates.
#[derive(Debug, Clone)]
pub struct MarginalLikelihoodEstimate {
    pub log_value: f64,
    pub particles: WeightedParticleSet,
    pub ess: f64,
}

/// Independence proposal for the inactive block given the active point.
pub trait InactiveProposal {
    fn sample(&self, active: &Vector, rng: &mut dyn RngCore) -> Vector;
    fn log_density(&self, active: &Vector, inactive: &Vector) -> f64;
}

/// Proposes from the prior conditional `p_{i|a}`. With this proposal the
/// prior and proposal densities cancel exactly, leaving the prior-average
/// likelihood estimator.
pub struct PriorConditionalProposal<'a>(pub &'a ConditionalGaussian);

impl InactiveProposal for PriorConditionalProposal<'_> {
    fn sample(&self, active: &Vector, rng: &mut dyn RngCore) -> Vector {
        self.0.sample(active, rng)
    }
    fn log_density(&self, active: &Vector, inactive: &Vector) -> f64 {
        self.0.log_density(active, inactive)
    }
}

/// A fixed Gaussian independence proposal, ignoring the active point.
pub struct FixedGaussianProposal<'a>(pub &'a crate::gaussian::Gaussian);

impl InactiveProposal for FixedGaussianProposal<'_> {
    fn sample(&self, _active: &Vector, rng: &mut dyn RngCore) -> Vector {
        self.0.sample(rng)
    }
    fn log_density(&self, _active: &Vector, inactive: &Vector) -> f64 {
        self.0.log_density(inactive)
    }
}

/// Importance-sampling estimate of the marginal likelihood at `active`.
///
/// Returns an error only when every particle has zero weight or the
/// proposal has a support violation at a sampled point.
pub fn is_marginal_likelihood<R: Rng>(
    active: &Vector,
    model: &dyn TargetModel,
    split: &SubspaceSplit,
    fact: &PriorFactorization,
    proposal: &dyn InactiveProposal,
    n_particles: usize,
    rng: &mut R,
) -> Result<MarginalLikelihoodEstimate> {
    if n_particles == 0 {
        return Err(Error::InvalidArgument(
            "importance sampling needs at least one particle".into(),
        ));
    }
    let mut points = Vec::with_capacity(n_particles);
    let mut log_weights = Vec::with_capacity(n_particles);
    for _ in 0..n_particles {
        let inactive = proposal.sample(active, &mut *rng);
        let log_q = proposal.log_density(active, &inactive);
        if log_q == f64::NEG_INFINITY {
            return Err(Error::ProposalSupportViolation);
        }
        let log_p = fact.inactive_given_active.log_density(active, &inactive);
        let theta = split.to_theta(active, &inactive)?;
        let log_l = model.log_likelihood(&theta);
        log_weights.push(log_p - log_q + log_l);
        points.push(theta);
    }
    let (normalized, log_sum) = normalize_log_weights(&log_weights)?;
    let log_value = log_sum - (n_particles as f64).ln();
    let ess = ess(&normalized)?;
    Ok(MarginalLikelihoodEstimate {
        log_value,
        particles: WeightedParticleSet {
            points,
            log_weights,
            normalized,
            log_z_increments: vec![log_value],
        },
        ess,
    })
}

/// Effective sample size `1 / Σ w_n²` of a normalised weight vector.
pub fn ess(normalized: &[f64]) -> Result<f64> {
    check_normalized(normalized, 1e-9)?;
    Ok(1.0 / normalized.iter().map(|&w| w * w).sum::<f64>())
}

/// Posterior expectation using the selected point of each iteration:
/// `(1/(N+1)) Σ_{m=0}^{N} g(θ^m)`.
pub fn estimate_expectation_single<F>(trace: &ChainTrace, g: F) -> Result<Vector>
where
    F: Fn(&Vector) -> Vector,
{
    if trace.records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut acc = g(&trace.records[0].theta);
    for rec in &trace.records[1..] {
        acc += g(&rec.theta);
    }
    Ok(acc / trace.records.len() as f64)
}

/// Posterior expectation using every stored particle, weighted:
/// `(1/(N+1)) Σ_m Σ_n w^{n,m} g(θ^{n,m})`.
///
/// Iterations without a particle set (plain MH, Gibbs sweeps) contribute
/// their single point with unit weight.
pub fn estimate_expectation_weighted<F>(trace: &ChainTrace, g: F) -> Result<Vector>
where
    F: Fn(&Vector) -> Vector,
{
    if trace.records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut acc: Option<Vector> = None;
    for rec in &trace.records {
        let contribution = match &rec.particles {
            Some(set) => {
                let mut sum = g(&set.points[0]) * set.normalized[0];
                for (p, &w) in set.points.iter().zip(&set.normalized).skip(1) {
                    sum += g(p) * w;
                }
                sum
            }
            None => g(&rec.theta),
        };
        match &mut acc {
            Some(a) => *a += contribution,
            None => acc = Some(contribution),
        }
    }
    Ok(acc.expect("nonempty trace") / trace.records.len() as f64)
}

/// One row of the subspace-selection diagnostic.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EssCurvePoint {
    pub active_dim: usize,
    pub inactive_dim: usize,
    pub ess_percent: f64,
    pub log_weight_variance: f64,
}

/// ESS of the prior-proposal estimator against candidate active dimensions.
///
/// For every `d_a = 1..d-1`, splits on the supplied gradient matrix,
/// estimates the marginal likelihood at the projection of `reference_theta`
/// (the origin by default) with `n_particles` prior-conditional draws, and
/// reports the ESS as a percentage alongside the sample variance of the
/// log weights. Each candidate uses its own substream, so rows are
/// independent of evaluation order.
pub fn ess_vs_dimension_curve(
    model: &dyn TargetModel,
    grad_matrix: &Matrix,
    n_particles: usize,
    reference_theta: Option<&Vector>,
    stream: RngStream,
) -> Result<Vec<EssCurvePoint>> {
    let d = model.dim();
    let mut out = Vec::with_capacity(d.saturating_sub(1));
    for active_dim in 1..d {
        let split = split_from_matrix(grad_matrix, active_dim)?;
        let fact = factorize_gaussian_prior(model.prior(), &split)?;
        let active = match reference_theta {
            Some(theta) => split.from_theta(theta)?.0,
            None => Vector::zeros(active_dim),
        };
        let mut rng = stream.substream(active_dim as u64).rng();
        let proposal = PriorConditionalProposal(&fact.inactive_given_active);
        let est = is_marginal_likelihood(
            &active,
            model,
            &split,
            &fact,
            &proposal,
            n_particles,
            &mut rng,
        )?;
        out.push(EssCurvePoint {
            active_dim,
            inactive_dim: d - active_dim,
            ess_percent: 100.0 * est.ess / n_particles as f64,
            log_weight_variance: sample_variance(&est.particles.log_weights),
        });
    }
    Ok(out)
}

fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Emit the curve as CSV with columns `d_a,d_i,ess_percent,logw_variance`.
pub fn write_ess_curve_csv<W: Write>(mut w: W, curve: &[EssCurvePoint]) -> Result<()> {
    writeln!(w, "d_a,d_i,ess_percent,logw_variance")?;
    for p in curve {
        writeln!(
            w,
            "{},{},{},{}",
            p.active_dim, p.inactive_dim, p.ess_percent, p.log_weight_variance
        )?;
    }
    Ok(())
}
