//! Sequential Monte Carlo machinery.
//!
//! One engine drives three entry points: an SMC sampler over the inactive
//! block for a fixed active point, the role-swapped sampler over the active
//! block, and conditional SMC over the active block in which one retained
//! trajectory is held fixed (the particle-Gibbs kernel).
//!
//! Stage `s` targets `π_s(x) ∝ p(x) l_{1:s}(θ(x))` where `p` is the prior
//! piece for the free block. Each stage reweights by the incremental
//! likelihood ratio, resamples (stratified) when the weight ESS falls below
//! a threshold, then applies a random-walk MH move invariant for `π_s`.
//! The normalising-constant estimate accumulates the per-stage log-mean of
//! the unnormalised weights, so a single-stage run reproduces the
//! importance-sampling estimator bit for bit on a shared RNG stream.

use rand::{Rng, RngCore};

use crate::estimators::WeightedParticleSet;
use crate::gaussian::{ConditionalGaussian, Gaussian};
use crate::models::TargetModel;
use crate::subspace::{PriorFactorization, SubspaceSplit};
use crate::weights::{check_normalized, log_sum_exp, normalize_log_weights};
use crate::{Error, Matrix, Result, Vector};

/// `2.38²`: the usual random-walk scale numerator for Gaussian targets.
pub const OPTIMAL_RW_SCALE: f64 = 2.38 * 2.38;

/// Stratified resampling: one uniform per stratum `[k/N, (k+1)/N)`,
/// inverted through the cumulative weights. The expected offspring count
/// of index `n` is `N w_n`.
pub fn stratified_resample<R: Rng>(
    normalized: &[f64],
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_normalized(normalized, 1e-9)?;
    if n_draws == 0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(n_draws);
    let mut idx = 0usize;
    let mut cum = normalized[0];
    for k in 0..n_draws {
        let u = (k as f64 + rng.random::<f64>()) / n_draws as f64;
        while u > cum && idx + 1 < normalized.len() {
            idx += 1;
            cum += normalized[idx];
        }
        out.push(idx);
    }
    Ok(out)
}

/// Move proposal used inside SMC stages.
#[derive(Debug, Clone)]
pub enum MoveProposal {
    /// Random walk with covariance `scale · (2.38²/d) · Σ̂ + 1e-10 I`,
    /// where `Σ̂` is the empirical covariance of the current particles.
    AdaptiveScaled { scale: f64 },
    /// Random walk with a fixed covariance.
    FixedGaussian { cov: Matrix },
}

#[derive(Debug, Clone)]
pub struct SmcConfig {
    pub n_particles: usize,
    /// Resample when `ESS < resample_threshold · N`.
    pub resample_threshold: f64,
    pub move_proposal: MoveProposal,
    /// MH moves per particle per stage.
    pub n_moves: usize,
}

impl SmcConfig {
    pub fn new(n_particles: usize) -> Self {
        Self {
            n_particles,
            resample_threshold: 0.5,
            move_proposal: MoveProposal::AdaptiveScaled { scale: 1.0 },
            n_moves: 1,
        }
    }
}

/// A tempered target over one free coordinate block.
pub trait SmcTarget {
    fn dim(&self) -> usize;
    fn num_stages(&self) -> usize;
    fn sample_init(&self, rng: &mut dyn RngCore) -> Vector;
    /// Prior factor of every stage target (also the initial distribution).
    fn log_prior(&self, x: &Vector) -> f64;
    /// `log l_{1:s}` at the full parameter corresponding to `x`.
    fn log_like_cumulative(&self, x: &Vector, stage: usize) -> f64;
    /// Map free coordinates to the full parameter vector.
    fn reconstruct(&self, x: &Vector) -> Vector;
}

/// Which block of the split is free in a [`SubspaceTarget`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreeBlock {
    Active,
    Inactive,
}

/// Which prior piece governs a free active block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveBlockPrior {
    /// `p_a`: the marginal, as used by the conditional-SMC kernel.
    Marginal,
    /// `p_{a|i}`: the conditional on the fixed inactive point.
    ConditionalOnInactive,
}

enum PriorPiece<'a> {
    Marginal(&'a Gaussian),
    Conditional(&'a ConditionalGaussian),
}

/// SMC target over one block of a subspace split, the other block fixed.
pub struct SubspaceTarget<'a> {
    model: &'a dyn TargetModel,
    split: &'a SubspaceSplit,
    fixed: Vector,
    free: FreeBlock,
    prior: PriorPiece<'a>,
}

/// Target over the inactive block for a fixed active point; the prior
/// piece is `p_{i|a}`.
pub fn inactive_target<'a>(
    model: &'a dyn TargetModel,
    split: &'a SubspaceSplit,
    fact: &'a PriorFactorization,
    active: Vector,
) -> SubspaceTarget<'a> {
    SubspaceTarget {
        model,
        split,
        fixed: active,
        free: FreeBlock::Inactive,
        prior: PriorPiece::Conditional(&fact.inactive_given_active),
    }
}

/// Target over the active block for a fixed inactive point.
pub fn active_target<'a>(
    model: &'a dyn TargetModel,
    split: &'a SubspaceSplit,
    fact: &'a PriorFactorization,
    inactive: Vector,
    prior: ActiveBlockPrior,
) -> SubspaceTarget<'a> {
    SubspaceTarget {
        model,
        split,
        fixed: inactive,
        free: FreeBlock::Active,
        prior: match prior {
            ActiveBlockPrior::Marginal => PriorPiece::Marginal(&fact.active_marginal),
            ActiveBlockPrior::ConditionalOnInactive => {
                PriorPiece::Conditional(&fact.active_given_inactive)
            }
        },
    }
}

impl SmcTarget for SubspaceTarget<'_> {
    fn dim(&self) -> usize {
        match self.free {
            FreeBlock::Active => self.split.active_dim(),
            FreeBlock::Inactive => self.split.inactive_dim(),
        }
    }

    fn num_stages(&self) -> usize {
        self.model.num_stages()
    }

    fn sample_init(&self, rng: &mut dyn RngCore) -> Vector {
        match &self.prior {
            PriorPiece::Marginal(g) => g.sample(rng),
            PriorPiece::Conditional(c) => c.sample(&self.fixed, rng),
        }
    }

    fn log_prior(&self, x: &Vector) -> f64 {
        match &self.prior {
            PriorPiece::Marginal(g) => g.log_density(x),
            PriorPiece::Conditional(c) => c.log_density(&self.fixed, x),
        }
    }

    fn log_like_cumulative(&self, x: &Vector, stage: usize) -> f64 {
        let theta = self.reconstruct(x);
        self.model.log_likelihood_cumulative(&theta, stage)
    }

    fn reconstruct(&self, x: &Vector) -> Vector {
        let (active, inactive) = match self.free {
            FreeBlock::Active => (x, &self.fixed),
            FreeBlock::Inactive => (&self.fixed, x),
        };
        self.split
            .to_theta(active, inactive)
            .expect("block dimensions fixed at construction")
    }
}

/// One particle's path through the stages with its unnormalised weight
/// history. Both vectors have `t + 1` entries; index 0 is the initial
/// state with the uniform-weight convention `log(1/N)`. The terminal
/// position repeats the last moved position, since the final stage stops
/// after weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub positions: Vec<Vector>,
    pub log_unnorm_weights: Vec<f64>,
}

impl Trajectory {
    pub fn terminal(&self) -> &Vector {
        self.positions.last().expect("trajectory is nonempty")
    }
}

/// Per-stage bookkeeping of one SMC run.
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub ess: f64,
    pub resampled: bool,
    pub log_z_increment: f64,
    /// Acceptance rate of the move step; NaN at the final stage (no move).
    pub move_acceptance: f64,
}

/// Output of an SMC run.
#[derive(Debug, Clone)]
pub struct SmcRunRecord {
    pub stages: Vec<StageRecord>,
    /// `log ẑ = Σ_s log Σ_n w̃_s^n`: the normalising-constant estimate.
    pub log_z_estimate: f64,
    /// Final-stage particles in full parameter space with their weights.
    pub final_particles: WeightedParticleSet,
    /// Free-block paths with weight histories, for particle-Gibbs use.
    pub trajectories: Vec<Trajectory>,
    /// Likelihood evaluations spent rebuilding caches when a resample
    /// clones the retained particle (conditional runs only).
    pub retained_clone_evals: u64,
}

impl SmcRunRecord {
    /// Normalised final-stage weights.
    pub fn final_normalized(&self) -> &[f64] {
        &self.final_particles.normalized
    }
}

/// Run the SMC sampler up to stage `t`.
pub fn run_smc<R: Rng>(
    target: &dyn SmcTarget,
    t: usize,
    config: &SmcConfig,
    rng: &mut R,
) -> Result<SmcRunRecord> {
    smc_engine(target, t, config, None, rng)
}

/// Conditional SMC: particle 1 is the retained trajectory. It is never
/// resampled away or moved, its stored per-stage weights are reused, and
/// the reweight/resample/move loops run over the free particles only.
pub fn run_conditional_smc<R: Rng>(
    target: &dyn SmcTarget,
    retained: &Trajectory,
    t: usize,
    config: &SmcConfig,
    rng: &mut R,
) -> Result<SmcRunRecord> {
    if config.n_particles < 2 {
        return Err(Error::TooFewParticles(config.n_particles));
    }
    if retained.positions.len() != t + 1 || retained.log_unnorm_weights.len() != t + 1 {
        return Err(Error::InvalidArgument(format!(
            "retained trajectory must carry {} stages, got {}",
            t + 1,
            retained.positions.len()
        )));
    }
    smc_engine(target, t, config, Some(retained), rng)
}

struct ParticleState {
    pos: Vector,
    path: Vec<Vector>,
    weight_history: Vec<f64>,
    /// `l_{1:s}` at `pos` for the stage last weighted or moved.
    log_like: f64,
    log_prior: f64,
}

fn smc_engine<R: Rng>(
    target: &dyn SmcTarget,
    t: usize,
    config: &SmcConfig,
    retained: Option<&Trajectory>,
    rng: &mut R,
) -> Result<SmcRunRecord> {
    let n = config.n_particles;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "SMC needs at least one particle".into(),
        ));
    }
    if t == 0 || t > target.num_stages() {
        return Err(Error::InvalidArgument(format!(
            "stage {t} outside 1..={}",
            target.num_stages()
        )));
    }
    let free_start = usize::from(retained.is_some());
    let log_uniform = -(n as f64).ln();

    let mut particles: Vec<ParticleState> = Vec::with_capacity(n);
    if let Some(ret) = retained {
        particles.push(ParticleState {
            pos: ret.positions[0].clone(),
            path: ret.positions.clone(),
            weight_history: ret.log_unnorm_weights.clone(),
            log_like: 0.0,
            log_prior: 0.0,
        });
    }
    for _ in free_start..n {
        let pos = target.sample_init(&mut *rng);
        let log_prior = target.log_prior(&pos);
        particles.push(ParticleState {
            path: vec![pos.clone()],
            weight_history: vec![log_uniform],
            log_like: 0.0,
            log_prior,
            pos,
        });
    }

    let mut log_w_prev = vec![log_uniform; n];
    let mut uniform_prev = true;
    let mut stages: Vec<StageRecord> = Vec::with_capacity(t);
    let mut log_z = 0.0;
    let mut retained_clone_evals = 0u64;
    let mut final_normalized = Vec::new();

    for s in 1..=t {
        // Reweight by l_{1:s} / l_{1:s-1} at the current positions; the
        // retained particle reuses its stored weight for this stage.
        let mut log_ratios = vec![0.0; n];
        let mut log_wtilde = vec![0.0; n];
        if let Some(ret) = retained {
            log_wtilde[0] = ret.log_unnorm_weights[s];
        }
        for j in free_start..n {
            let ll = target.log_like_cumulative(&particles[j].pos, s);
            log_ratios[j] = ll - particles[j].log_like;
            particles[j].log_like = ll;
            log_wtilde[j] = log_w_prev[j] + log_ratios[j];
            particles[j].weight_history.push(log_wtilde[j]);
        }

        let increment = if uniform_prev && retained.is_none() {
            // Factored form log Σ exp(c + r) = log Σ exp(r) + c with the
            // exact uniform constant: a one-stage run then reproduces the
            // importance-sampling estimator bit for bit.
            log_sum_exp(&log_ratios) + log_w_prev[0]
        } else {
            log_sum_exp(&log_wtilde)
        };
        let (normalized, log_sum) = match normalize_log_weights(&log_wtilde) {
            Ok(v) => v,
            Err(_) => return Err(Error::DegenerateSmc { stage: s }),
        };
        log_z += increment;
        let stage_ess = 1.0 / normalized.iter().map(|&w| w * w).sum::<f64>();

        if s == t {
            for p in particles.iter_mut().skip(free_start) {
                p.path.push(p.pos.clone());
            }
            stages.push(StageRecord {
                ess: stage_ess,
                resampled: false,
                log_z_increment: increment,
                move_acceptance: f64::NAN,
            });
            final_normalized = normalized;
            break;
        }

        let resampled = stage_ess < config.resample_threshold * n as f64;
        if resampled {
            let ancestors = stratified_resample(&normalized, n - free_start, rng)?;
            let mut next: Vec<ParticleState> = Vec::with_capacity(n);
            let mut pool = particles;
            if retained.is_some() {
                next.push(pool.remove(0));
            }
            for &src in &ancestors {
                let state = match (retained, src) {
                    (Some(ret), 0) => {
                        // The clone leaves the retained slot and becomes an
                        // ordinary particle: rebuild its stage caches.
                        let pos = ret.positions[s - 1].clone();
                        let log_like = target.log_like_cumulative(&pos, s);
                        retained_clone_evals += 1;
                        let log_prior = target.log_prior(&pos);
                        ParticleState {
                            path: ret.positions[..s].to_vec(),
                            weight_history: ret.log_unnorm_weights[..=s].to_vec(),
                            log_like,
                            log_prior,
                            pos,
                        }
                    }
                    _ => {
                        let p = &pool[src - free_start];
                        ParticleState {
                            pos: p.pos.clone(),
                            path: p.path.clone(),
                            weight_history: p.weight_history.clone(),
                            log_like: p.log_like,
                            log_prior: p.log_prior,
                        }
                    }
                };
                next.push(state);
            }
            particles = next;
            for w in log_w_prev.iter_mut() {
                *w = log_uniform;
            }
            uniform_prev = true;
        } else {
            for j in 0..n {
                log_w_prev[j] = log_wtilde[j] - log_sum;
            }
            uniform_prev = false;
        }

        // Move step: random-walk MH invariant for π_s over free particles.
        let chol = move_chol(target, &particles, retained, s, config)?;
        let mut accepted = 0u64;
        let mut proposed = 0u64;
        for j in free_start..n {
            for _ in 0..config.n_moves {
                let z = Vector::from_fn(target.dim(), |_, _| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                let prop = &particles[j].pos + &chol * z;
                let log_prior_new = target.log_prior(&prop);
                let log_like_new = target.log_like_cumulative(&prop, s);
                let log_alpha =
                    (log_prior_new + log_like_new) - (particles[j].log_prior + particles[j].log_like);
                let u: f64 = rng.random();
                proposed += 1;
                if u.ln() < log_alpha {
                    particles[j].pos = prop;
                    particles[j].log_prior = log_prior_new;
                    particles[j].log_like = log_like_new;
                    accepted += 1;
                }
            }
            let pos = particles[j].pos.clone();
            particles[j].path.push(pos);
        }
        stages.push(StageRecord {
            ess: stage_ess,
            resampled,
            log_z_increment: increment,
            move_acceptance: if proposed == 0 {
                f64::NAN
            } else {
                accepted as f64 / proposed as f64
            },
        });
    }

    let log_z_increments: Vec<f64> = stages.iter().map(|st| st.log_z_increment).collect();
    let final_log_weights: Vec<f64> = particles
        .iter()
        .map(|p| *p.weight_history.last().unwrap())
        .collect();
    let points: Vec<Vector> = particles
        .iter()
        .map(|p| target.reconstruct(p.path.last().unwrap()))
        .collect();
    let trajectories: Vec<Trajectory> = particles
        .into_iter()
        .map(|p| Trajectory {
            positions: p.path,
            log_unnorm_weights: p.weight_history,
        })
        .collect();

    Ok(SmcRunRecord {
        stages,
        log_z_estimate: log_z,
        final_particles: WeightedParticleSet {
            points,
            log_weights: final_log_weights,
            normalized: final_normalized,
            log_z_increments,
        },
        trajectories,
        retained_clone_evals,
    })
}

/// Cholesky factor of the move-proposal covariance for the current stage.
fn move_chol(
    target: &dyn SmcTarget,
    particles: &[ParticleState],
    retained: Option<&Trajectory>,
    stage: usize,
    config: &SmcConfig,
) -> Result<Matrix> {
    let d = target.dim();
    let cov = match &config.move_proposal {
        MoveProposal::FixedGaussian { cov } => cov.clone(),
        MoveProposal::AdaptiveScaled { scale } => {
            let mut positions: Vec<&Vector> = Vec::with_capacity(particles.len());
            for (j, p) in particles.iter().enumerate() {
                if j == 0 {
                    if let Some(ret) = retained {
                        positions.push(&ret.positions[stage - 1]);
                        continue;
                    }
                }
                positions.push(&p.pos);
            }
            let count = positions.len() as f64;
            let mut mean = Vector::zeros(d);
            for p in &positions {
                mean += *p;
            }
            mean /= count;
            let mut cov = Matrix::zeros(d, d);
            for p in &positions {
                let c = *p - &mean;
                cov.ger(1.0, &c, &c, 1.0);
            }
            if positions.len() > 1 {
                cov /= count - 1.0;
            }
            cov * (scale * OPTIMAL_RW_SCALE / d as f64)
        }
    };
    let regularized = cov + Matrix::identity(d, d) * 1e-10;
    nalgebra::Cholesky::new(regularized)
        .map(|c| c.l())
        .ok_or(Error::NotPositiveDefinite)
}
