//! The MCMC drivers.
//!
//! Six chains over the same trace format: plain random-walk MH on the full
//! parameter, pseudo-marginal MH on the active block with an IS estimate of
//! the inactive marginal likelihood (AS-MH), the particle-marginal variant
//! with an SMC estimate (AS-PMMH) and its role-inverted twin (AS-PMMH-i),
//! Metropolis-within-Gibbs on the split (AS-MwG), and Metropolis within
//! particle Gibbs, which refreshes the active block with conditional SMC
//! (AS-MwPG).
//!
//! Pseudo-marginal bookkeeping: a fresh estimate is made only for the
//! proposal; the denominator reuses the stored estimate, and on rejection
//! every stored quantity (point, particle set, selected index, estimate)
//! is carried over unchanged.

use rand::Rng;
use std::io::Write;

use crate::estimators::{is_marginal_likelihood, InactiveProposal, WeightedParticleSet};
use crate::models::{EvalCounter, TargetModel};
use crate::smc::{
    active_target, inactive_target, run_conditional_smc, run_smc, ActiveBlockPrior, SmcConfig,
    SmcRunRecord, Trajectory, OPTIMAL_RW_SCALE,
};
use crate::subspace::{PriorFactorization, SubspaceSplit};
use crate::weights::sample_categorical;
use crate::{Error, Matrix, Result, Vector};

/// One iteration of any chain.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// The chain's primary coordinate block: `a` for the subspace chains,
    /// the full parameter for plain MH, the inactive block for AS-PMMH-i.
    pub active: Vector,
    /// Full parameter reconstructed through the selected particle.
    pub theta: Vector,
    /// Index of the selected particle (0 when there is no particle set).
    pub selected_index: usize,
    /// The stored marginal-likelihood estimate (the full log-likelihood
    /// for samplers that do not estimate a marginal).
    pub log_marginal_estimate: f64,
    /// Outcome of the primary-block MH step.
    pub accepted: bool,
    /// Outcome of the inactive-block update, where one exists.
    pub accepted_inactive: Option<bool>,
    /// The weighted particle set stored by pseudo-marginal samplers.
    pub particles: Option<WeightedParticleSet>,
}

/// A completed run.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    pub records: Vec<TraceRecord>,
    pub algorithm: &'static str,
    /// Likelihood evaluations made through the model (initialisation
    /// included).
    pub likelihood_evals: u64,
    /// The data-dependent part of the evaluation count: cache rebuilds
    /// when conditional SMC resampling clones the retained particle.
    pub retained_clone_evals: u64,
    pub active_acceptances: u64,
    pub inactive_acceptances: u64,
}

impl ChainTrace {
    fn new(algorithm: &'static str) -> Self {
        Self {
            records: Vec::new(),
            algorithm,
            likelihood_evals: 0,
            retained_clone_evals: 0,
            active_acceptances: 0,
            inactive_acceptances: 0,
        }
    }

    /// Iterations after the initial state.
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.iterations() == 0 {
            return f64::NAN;
        }
        self.active_acceptances as f64 / self.iterations() as f64
    }

    pub fn inactive_acceptance_rate(&self) -> f64 {
        if self.iterations() == 0 {
            return f64::NAN;
        }
        self.inactive_acceptances as f64 / self.iterations() as f64
    }

    /// Records after discarding a burn-in fraction (of the whole trace).
    pub fn post_burn_in(&self, fraction: f64) -> &[TraceRecord] {
        let cut = ((self.records.len() as f64) * fraction).floor() as usize;
        &self.records[cut.min(self.records.len())..]
    }

    /// Per-iteration CSV: iteration, active coords, reconstructed θ,
    /// log estimate, acceptance flags, selected index.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let da = self.records.first().map_or(0, |r| r.active.len());
        let d = self.records.first().map_or(0, |r| r.theta.len());
        let mut header = String::from("iteration");
        for j in 0..da {
            header.push_str(&format!(",a_{j}"));
        }
        for j in 0..d {
            header.push_str(&format!(",theta_{j}"));
        }
        header.push_str(",log_estimate,accepted,accepted_inactive,selected_index");
        writeln!(w, "{header}")?;
        for (m, rec) in self.records.iter().enumerate() {
            let mut line = m.to_string();
            for v in rec.active.iter() {
                line.push_str(&format!(",{v}"));
            }
            for v in rec.theta.iter() {
                line.push_str(&format!(",{v}"));
            }
            let inact = rec
                .accepted_inactive
                .map_or(String::new(), |b| (b as u8).to_string());
            line.push_str(&format!(
                ",{},{},{},{}",
                rec.log_marginal_estimate, rec.accepted as u8, inact, rec.selected_index
            ));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Symmetric Gaussian random-walk proposal. A zero covariance is the
/// degenerate walk that never leaves the current point.
#[derive(Debug, Clone)]
pub struct GaussianRandomWalk {
    chol: Option<Matrix>,
    dim: usize,
}

impl GaussianRandomWalk {
    pub fn new(cov: Matrix) -> Result<Self> {
        let dim = cov.nrows();
        if cov.ncols() != dim {
            return Err(Error::DimensionMismatch {
                context: "random walk covariance",
                expected: dim,
                got: cov.ncols(),
            });
        }
        if cov.iter().all(|&v| v == 0.0) {
            return Ok(Self { chol: None, dim });
        }
        let chol = nalgebra::Cholesky::new(cov)
            .map(|c| c.l())
            .ok_or(Error::NotPositiveDefinite)?;
        Ok(Self {
            chol: Some(chol),
            dim,
        })
    }

    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        Self::new(Matrix::identity(dim, dim) * variance)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn propose<R: Rng + ?Sized>(&self, current: &Vector, rng: &mut R) -> Vector {
        match &self.chol {
            None => current.clone(),
            Some(l) => {
                let z = Vector::from_fn(self.dim, |_, _| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                current + l * z
            }
        }
    }
}

/// Proposal family for a Gibbs block update.
#[derive(Debug, Clone)]
pub enum BlockUpdateProposal {
    /// Independence proposal from the prior conditional of the block.
    PriorConditional,
    /// Symmetric random walk.
    RandomWalk(GaussianRandomWalk),
}

/// Project a full-space covariance onto a basis block and apply the
/// `2.38²/k` scaling (times `extra_scale`), with a small ridge so the
/// result stays usable when the estimate is nearly singular.
pub fn scaled_block_covariance(full_cov: &Matrix, basis: &Matrix, extra_scale: f64) -> Matrix {
    let k = basis.ncols();
    let block = basis.transpose() * full_cov * basis;
    let block = (&block + block.transpose()) * 0.5;
    block * (extra_scale * OPTIMAL_RW_SCALE / k as f64) + Matrix::identity(k, k) * 1e-10
}

fn check_finite(v: &Vector) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInit);
    }
    Ok(())
}

fn accept<R: Rng>(log_alpha: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    u.ln() < log_alpha
}

/// Random-walk Metropolis-Hastings on the full parameter, targeting
/// `p(θ) l(θ)`.
pub fn run_mh<R: Rng>(
    model: &dyn TargetModel,
    proposal: &GaussianRandomWalk,
    n_steps: usize,
    init: Vector,
    rng: &mut R,
) -> Result<ChainTrace> {
    check_finite(&init)?;
    let counted = EvalCounter::new(model);
    let mut trace = ChainTrace::new("mh");

    let mut current = init;
    let mut log_prior = model.prior().log_density(&current);
    let mut log_like = counted.log_likelihood(&current);
    if !log_prior.is_finite() || log_like.is_nan() {
        return Err(Error::InvalidInit);
    }
    trace.records.push(TraceRecord {
        active: current.clone(),
        theta: current.clone(),
        selected_index: 0,
        log_marginal_estimate: log_like,
        accepted: true,
        accepted_inactive: None,
        particles: None,
    });

    for _ in 0..n_steps {
        let prop = proposal.propose(&current, rng);
        let lp = model.prior().log_density(&prop);
        let ll = counted.log_likelihood(&prop);
        let log_alpha = (lp + ll) - (log_prior + log_like);
        let accepted = accept(log_alpha, rng);
        if accepted {
            current = prop;
            log_prior = lp;
            log_like = ll;
            trace.active_acceptances += 1;
        }
        trace.records.push(TraceRecord {
            active: current.clone(),
            theta: current.clone(),
            selected_index: 0,
            log_marginal_estimate: log_like,
            accepted,
            accepted_inactive: None,
            particles: None,
        });
    }
    trace.likelihood_evals = counted.count();
    Ok(trace)
}

/// Pseudo-marginal state shared by AS-MH and the PMMH variants.
struct MarginalState {
    point: Vector,
    log_estimate: f64,
    particles: WeightedParticleSet,
    selected: usize,
}

impl MarginalState {
    fn record(&self, accepted: bool) -> TraceRecord {
        TraceRecord {
            active: self.point.clone(),
            theta: self.particles.points[self.selected].clone(),
            selected_index: self.selected,
            log_marginal_estimate: self.log_estimate,
            accepted,
            accepted_inactive: None,
            particles: Some(self.particles.clone()),
        }
    }
}

/// Is this error a degenerate estimate (treated as certain rejection when
/// it happens at a proposal)?
fn is_degenerate(err: &Error) -> bool {
    matches!(err, Error::DegenerateWeights | Error::DegenerateSmc { .. })
}

/// Active subspace Metropolis-Hastings: pseudo-marginal MH on the active
/// block, the inactive marginal likelihood estimated by importance
/// sampling at every proposal.
#[allow(clippy::too_many_arguments)]
pub fn run_as_mh<R: Rng>(
    model: &dyn TargetModel,
    split: &SubspaceSplit,
    fact: &PriorFactorization,
    proposal_active: &GaussianRandomWalk,
    proposal_inactive: &dyn InactiveProposal,
    n_inner: usize,
    n_iters: usize,
    init_active: Vector,
    rng: &mut R,
) -> Result<ChainTrace> {
    check_finite(&init_active)?;
    let counted = EvalCounter::new(model);
    let mut trace = ChainTrace::new("as-mh");

    let estimate = |point: &Vector, rng: &mut R| {
        is_marginal_likelihood(point, &counted, split, fact, proposal_inactive, n_inner, rng)
    };

    let init_est = estimate(&init_active, rng)?;
    let selected = sample_categorical(&init_est.particles.normalized, rng);
    let mut state = MarginalState {
        point: init_active,
        log_estimate: init_est.log_value,
        particles: init_est.particles,
        selected,
    };
    trace.records.push(state.record(true));

    for _ in 0..n_iters {
        let prop = proposal_active.propose(&state.point, rng);
        match estimate(&prop, rng) {
            Ok(est) => {
                let selected = sample_categorical(&est.particles.normalized, rng);
                let log_alpha = (fact.active_marginal.log_density(&prop) + est.log_value)
                    - (fact.active_marginal.log_density(&state.point) + state.log_estimate);
                let accepted = accept(log_alpha, rng);
                if accepted {
                    state = MarginalState {
                        point: prop,
                        log_estimate: est.log_value,
                        particles: est.particles,
                        selected,
                    };
                    trace.active_acceptances += 1;
                }
                trace.records.push(state.record(accepted));
            }
            Err(e) if is_degenerate(&e) => {
                // zero estimate: certain rejection
                trace.records.push(state.record(false));
            }
            Err(e) => return Err(e),
        }
    }
    trace.likelihood_evals = counted.count();
    Ok(trace)
}

/// Active subspace particle marginal Metropolis-Hastings: as AS-MH, with
/// the estimate supplied by a full SMC run over the inactive block.
#[allow(clippy::too_many_arguments)]
pub fn run_as_pmmh<R: Rng>(
    model: &dyn TargetModel,
    split: &SubspaceSplit,
    fact: &PriorFactorization,
    proposal_active: &GaussianRandomWalk,
    smc_config: &SmcConfig,
    n_iters: usize,
    init_active: Vector,
    rng: &mut R,
) -> Result<ChainTrace> {
    check_finite(&init_active)?;
    let counted = EvalCounter::new(model);
    let mut trace = ChainTrace::new("as-pmmh");
    let stages = model.num_stages();

    let run = |point: Vector, rng: &mut R| -> Result<SmcRunRecord> {
        let target = inactive_target(&counted, split, fact, point);
        run_smc(&target, stages, smc_config, rng)
    };

    let init_rec = run(init_active.clone(), rng)?;
    let selected = sample_categorical(init_rec.final_normalized(), rng);
    let mut state = MarginalState {
        point: init_active,
        log_estimate: init_rec.log_z_estimate,
        particles: init_rec.final_particles,
        selected,
    };
    trace.records.push(state.record(true));

    for _ in 0..n_iters {
        let prop = proposal_active.propose(&state.point, rng);
        match run(prop.clone(), rng) {
            Ok(rec) => {
                let selected = sample_categorical(rec.final_normalized(), rng);
                let log_alpha = (fact.active_marginal.log_density(&prop) + rec.log_z_estimate)
                    - (fact.active_marginal.log_density(&state.point) + state.log_estimate);
                let accepted = accept(log_alpha, rng);
                if accepted {
                    state = MarginalState {
                        point: prop,
                        log_estimate: rec.log_z_estimate,
                        particles: rec.final_particles,
                        selected,
                    };
                    trace.active_acceptances += 1;
                }
                trace.records.push(state.record(accepted));
            }
            Err(e) if is_degenerate(&e) => {
                trace.records.push(state.record(false));
            }
            Err(e) => return Err(e),
        }
    }
    trace.likelihood_evals = counted.count();
    Ok(trace)
}

/// AS-PMMH with the roles of the blocks swapped: the chain moves the
/// inactive coordinates and SMC integrates the active ones.
#[allow(clippy::too_many_arguments)]
pub fn run_as_pmmh_inverted<R: Rng>(
    model: &dyn TargetModel,
    split: &SubspaceSplit,
    fact: &PriorFactorization,
    proposal_inactive: &GaussianRandomWalk,
    smc_config: &SmcConfig,
    n_iters: usize,
    init_inactive: Vector,
    rng: &mut R,
) -> Result<ChainTrace> {
    check_finite(&init_inactive)?;
    let counted = EvalCounter::new(model);
    let mut trace = ChainTrace::new("as-pmmh-i");
    let stages = model.num_stages();

    let run = |point: Vector, rng: &mut R| -> Result<SmcRunRecord> {
        let target = active_target(
            &counted,
            split,
            fact,
            point,
            ActiveBlockPrior::ConditionalOnInactive,
        );
        run_smc(&target, stages, smc_config, rng)
    };

    let init_rec = run(init_inactive.clone(), rng)?;
    let selected = sample_categorical(init_rec.final_normalized(), rng);
    let mut state = MarginalState {
        point: init_inactive,
        log_estimate: init_rec.log_z_estimate,
        particles: init_rec.final_particles,
        selected,
    };
    trace.records.push(state.record(true));

    for _ in 0..n_iters {
        let prop = proposal_inactive.propose(&state.point, rng);
        match run(prop.clone(), rng) {
            Ok(rec) => {
                let selected = sample_categorical(rec.final_normalized(), rng);
                let log_alpha = (fact.inactive_marginal.log_density(&prop) + rec.log_z_estimate)
                    - (fact.inactive_marginal.log_density(&state.point) + state.log_estimate);
                let accepted = accept(log_alpha, rng);
                if accepted {
                    state = MarginalState {
                        point: prop,
                        log_estimate: rec.log_z_estimate,
                        particles: rec.final_particles,
                        selected,
                    };
                    trace.active_acceptances += 1;
                }
                trace.records.push(state.record(accepted));
            }
            Err(e) if is_degenerate(&e) => {
                trace.records.push(state.record(false));
            }
            Err(e) => return Err(e),
        }
    }
    trace.likelihood_evals = counted.count();
    Ok(trace)
}

/// Active subspace Metropolis-within-Gibbs: per sweep, an MH update of the
/// inactive block given the active one, then an MH update of the active
/// block. Proposing the inactive block from its prior conditional cancels
/// the prior terms, leaving a pure likelihood ratio.
#[allow(clippy::too_many_arguments)]
pub fn run_as_mwg<R: Rng>(
    model: &dyn TargetModel,
    split: &SubspaceSplit,
    fact: &PriorFactorization,
    proposal_inactive: &BlockUpdateProposal,
    proposal_active: &GaussianRandomWalk,
    n_sweeps: usize,
    init: (Vector, Vector),
    rng: &mut R,
) -> Result<ChainTrace> {
    let (mut active, mut inactive) = init;
    check_finite(&active)?;
    check_finite(&inactive)?;
    let counted = EvalCounter::new(model);
    let mut trace = ChainTrace::new("as-mwg");

    let mut theta = split.to_theta(&active, &inactive)?;
    let mut log_like = counted.log_likelihood(&theta);
    if log_like.is_nan() {
        return Err(Error::InvalidInit);
    }
    trace.records.push(TraceRecord {
        active: active.clone(),
        theta: theta.clone(),
        selected_index: 0,
        log_marginal_estimate: log_like,
        accepted: true,
        accepted_inactive: Some(true),
        particles: None,
    });

    for _ in 0..n_sweeps {
        // inactive update given the current active point
        let (prop_inactive, log_prior_diff) = match proposal_inactive {
            BlockUpdateProposal::PriorConditional => {
                // proposal density equals the prior conditional: the ratio
                // reduces to the likelihood ratio exactly
                let prop = fact.inactive_given_active.sample(&active, &mut *rng);
                (prop, 0.0)
            }
            BlockUpdateProposal::RandomWalk(walk) => {
                let prop = walk.propose(&inactive, rng);
                let diff = fact.inactive_given_active.log_density(&active, &prop)
                    - fact.inactive_given_active.log_density(&active, &inactive);
                (prop, diff)
            }
        };
        let theta_prop = split.to_theta(&active, &prop_inactive)?;
        let ll_prop = counted.log_likelihood(&theta_prop);
        let accepted_inactive = accept(log_prior_diff + ll_prop - log_like, rng);
        if accepted_inactive {
            inactive = prop_inactive;
            theta = theta_prop;
            log_like = ll_prop;
            trace.inactive_acceptances += 1;
        }

        // active update given the (possibly refreshed) inactive point
        let prop_active = proposal_active.propose(&active, rng);
        let theta_prop = split.to_theta(&prop_active, &inactive)?;
        let ll_prop = counted.log_likelihood(&theta_prop);
        let log_alpha = (fact.active_marginal.log_density(&prop_active) + ll_prop)
            - (fact.active_marginal.log_density(&active) + log_like);
        let accepted = accept(log_alpha, rng);
        if accepted {
            active = prop_active;
            theta = theta_prop;
            log_like = ll_prop;
            trace.active_acceptances += 1;
        }

        trace.records.push(TraceRecord {
            active: active.clone(),
            theta: theta.clone(),
            selected_index: 0,
            log_marginal_estimate: log_like,
            accepted,
            accepted_inactive: Some(accepted_inactive),
            particles: None,
        });
    }
    trace.likelihood_evals = counted.count();
    Ok(trace)
}

/// Active subspace Metropolis within particle Gibbs: per sweep, an MH
/// update of the inactive block conditional on the retained trajectory's
/// endpoint, then a conditional-SMC refresh of the active block with the
/// retained trajectory held fixed, and promotion of a newly drawn index to
/// the retained slot (weight history included).
///
/// The initial retained trajectory comes from one unconditional SMC run on
/// the active block.
#[allow(clippy::too_many_arguments)]
pub fn run_as_mwpg<R: Rng>(
    model: &dyn TargetModel,
    split: &SubspaceSplit,
    fact: &PriorFactorization,
    proposal_inactive: &BlockUpdateProposal,
    csmc_config: &SmcConfig,
    n_sweeps: usize,
    init_inactive: Vector,
    rng: &mut R,
) -> Result<ChainTrace> {
    check_finite(&init_inactive)?;
    if csmc_config.n_particles < 2 {
        return Err(Error::TooFewParticles(csmc_config.n_particles));
    }
    let counted = EvalCounter::new(model);
    let mut trace = ChainTrace::new("as-mwpg");
    let stages = model.num_stages();
    let mut inactive = init_inactive;

    // initial retained trajectory from an unconditional run
    let init_rec = {
        let target = active_target(
            &counted,
            split,
            fact,
            inactive.clone(),
            ActiveBlockPrior::Marginal,
        );
        run_smc(&target, stages, csmc_config, rng)?
    };
    let init_u = sample_categorical(init_rec.final_normalized(), rng);
    let mut retained: Trajectory = init_rec.trajectories[init_u].clone();

    let record = |retained: &Trajectory,
                  inactive: &Vector,
                  selected: usize,
                  log_z: f64,
                  particles: WeightedParticleSet,
                  accepted_inactive: Option<bool>|
     -> Result<TraceRecord> {
        Ok(TraceRecord {
            active: retained.terminal().clone(),
            theta: split.to_theta(retained.terminal(), inactive)?,
            selected_index: selected,
            log_marginal_estimate: log_z,
            accepted: true,
            accepted_inactive,
            particles: Some(particles),
        })
    };
    trace.records.push(record(
        &retained,
        &inactive,
        init_u,
        init_rec.log_z_estimate,
        init_rec.final_particles,
        None,
    )?);

    for _ in 0..n_sweeps {
        // inactive MH update conditional on the retained endpoint
        let endpoint = retained.terminal().clone();
        let theta_cur = split.to_theta(&endpoint, &inactive)?;
        let ll_cur = counted.log_likelihood(&theta_cur);
        let (prop, log_prior_diff) = match proposal_inactive {
            BlockUpdateProposal::PriorConditional => {
                let prop = fact
                    .inactive_given_active
                    .sample(&endpoint, &mut *rng);
                (prop, 0.0)
            }
            BlockUpdateProposal::RandomWalk(walk) => {
                let prop = walk.propose(&inactive, rng);
                let diff = fact.inactive_given_active.log_density(&endpoint, &prop)
                    - fact.inactive_given_active.log_density(&endpoint, &inactive);
                (prop, diff)
            }
        };
        let theta_prop = split.to_theta(&endpoint, &prop)?;
        let ll_prop = counted.log_likelihood(&theta_prop);
        let accepted_inactive = accept(log_prior_diff + ll_prop - ll_cur, rng);
        if accepted_inactive {
            inactive = prop;
            trace.inactive_acceptances += 1;
        }

        // conditional SMC on the active block, then index promotion
        let rec = {
            let target = active_target(
                &counted,
                split,
                fact,
                inactive.clone(),
                ActiveBlockPrior::Marginal,
            );
            run_conditional_smc(&target, &retained, stages, csmc_config, rng)?
        };
        trace.retained_clone_evals += rec.retained_clone_evals;
        let u = sample_categorical(rec.final_normalized(), rng);
        retained = rec.trajectories[u].clone();
        trace.active_acceptances += 1;
        trace.records.push(record(
            &retained,
            &inactive,
            u,
            rec.log_z_estimate,
            rec.final_particles,
            Some(accepted_inactive),
        )?);
    }
    trace.likelihood_evals = counted.count();
    Ok(trace)
}

/// Sample mean and covariance of the reconstructed parameters in a slice
/// of trace records.
pub fn trace_moments(records: &[TraceRecord]) -> Result<(Vector, Matrix)> {
    if records.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two records for moment estimation".into(),
        ));
    }
    let d = records[0].theta.len();
    let n = records.len() as f64;
    let mut mean = Vector::zeros(d);
    for rec in records {
        mean += &rec.theta;
    }
    mean /= n;
    let mut cov = Matrix::zeros(d, d);
    for rec in records {
        let c = &rec.theta - &mean;
        cov.ger(1.0 / (n - 1.0), &c, &c, 1.0);
    }
    Ok((mean, cov))
}

/// Posterior mean and covariance from a pilot MH run with the
/// identity-scaled proposal `(2.38²/d) · I`, discarding a burn-in
/// fraction. Used to tune the measured runs' proposals.
pub fn pilot_posterior_stats<R: Rng>(
    model: &dyn TargetModel,
    n_steps: usize,
    burn_in_fraction: f64,
    init: Vector,
    rng: &mut R,
) -> Result<(Vector, Matrix)> {
    let d = model.dim();
    let proposal = GaussianRandomWalk::isotropic(d, OPTIMAL_RW_SCALE / d as f64)?;
    let trace = run_mh(model, &proposal, n_steps, init, rng)?;
    trace_moments(trace.post_burn_in(burn_in_fraction))
}

/// Pilot tuning iterated to a fixed point: round one uses the
/// identity-scaled proposal, every later round rescales the previous
/// round's covariance estimate. One round cannot calibrate targets whose
/// posterior scale is orders of magnitude away from unity; a few rounds
/// settle there in practice.
pub fn iterated_pilot_stats(
    model: &dyn TargetModel,
    rounds: usize,
    steps_per_round: usize,
    burn_in_fraction: f64,
    init: Vector,
    stream: crate::RngStream,
) -> Result<(Vector, Matrix)> {
    let d = model.dim();
    let identity = Matrix::identity(d, d);
    let (mut mean, mut cov) = pilot_posterior_stats(
        model,
        steps_per_round,
        burn_in_fraction,
        init,
        &mut stream.substream(0).rng(),
    )?;
    for round in 1..rounds {
        let proposal =
            GaussianRandomWalk::new(scaled_block_covariance(&cov, &identity, 1.0))?;
        let trace = run_mh(
            model,
            &proposal,
            steps_per_round,
            mean,
            &mut stream.substream(round as u64).rng(),
        )?;
        (mean, cov) = trace_moments(trace.post_burn_in(burn_in_fraction))?;
    }
    Ok((mean, cov))
}

/// How move steps inside SMC are priced when projecting budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveCostRule {
    /// Count reweighting evaluations only (one per particle per stage).
    ReweightOnly,
    /// Also count one evaluation per MH move proposal.
    IncludeMoves,
}

/// Likelihood evaluations of one unconditional SMC run.
pub fn smc_run_evals(n_particles: u64, stages: u64, n_moves: u64, rule: MoveCostRule) -> u64 {
    let reweight = n_particles * stages;
    match rule {
        MoveCostRule::ReweightOnly => reweight,
        MoveCostRule::IncludeMoves => {
            reweight + n_particles * stages.saturating_sub(1) * n_moves
        }
    }
}

/// Deterministic part of one conditional SMC run (the retained particle is
/// neither reweighted nor moved). Cache rebuilds after cloning the
/// retained particle are data-dependent and reported separately.
pub fn conditional_smc_evals(n_particles: u64, stages: u64, n_moves: u64, rule: MoveCostRule) -> u64 {
    smc_run_evals(n_particles.saturating_sub(1), stages, n_moves, rule)
}

/// `n_steps` proposals plus the initial evaluation.
pub fn mh_evals(n_steps: u64) -> u64 {
    n_steps + 1
}

/// `N_i` evaluations per iteration, initialisation included.
pub fn as_mh_evals(n_inner: u64, n_iters: u64) -> u64 {
    n_inner * (n_iters + 1)
}

/// One SMC run per iteration, initialisation included.
pub fn as_pmmh_evals(
    n_particles: u64,
    stages: u64,
    n_moves: u64,
    n_iters: u64,
    rule: MoveCostRule,
) -> u64 {
    (n_iters + 1) * smc_run_evals(n_particles, stages, n_moves, rule)
}

/// Two evaluations per sweep plus the initial one.
pub fn as_mwg_evals(n_sweeps: u64) -> u64 {
    2 * n_sweeps + 1
}

/// Initial unconditional run, then per sweep two inactive-update
/// evaluations plus one conditional SMC run (deterministic part).
pub fn as_mwpg_evals(
    n_particles: u64,
    stages: u64,
    n_moves: u64,
    n_sweeps: u64,
    rule: MoveCostRule,
) -> u64 {
    smc_run_evals(n_particles, stages, n_moves, rule)
        + n_sweeps * (2 + conditional_smc_evals(n_particles, stages, n_moves, rule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::PriorConditionalProposal;
    use crate::gaussian::Gaussian;
    use crate::models::{ConjugateGaussianModel, Tempering};
    use crate::subspace::factorize_gaussian_prior;
    use crate::RngStream;
    use nalgebra::{dmatrix, dvector};

    fn identity_split_2d() -> SubspaceSplit {
        SubspaceSplit::new(dmatrix![1.0; 0.0], dmatrix![0.0; 1.0], dvector![1.0, 0.0]).unwrap()
    }

    fn conjugate_2d(stages: usize, seed: u64) -> ConjugateGaussianModel {
        let mut rng = RngStream::new(seed, 0).rng();
        let data = crate::models::sample_gaussian_observations(16, 0.3, 1.0, &mut rng);
        ConjugateGaussianModel::new(
            Gaussian::isotropic(Vector::zeros(2), 4.0).unwrap(),
            dvector![1.0, 0.7],
            1.0,
            data,
            stages,
            Tempering::DataBlocks,
        )
        .unwrap()
    }

    /// Likelihood constant everywhere.
    struct FlatModel {
        prior: Gaussian,
    }
    impl TargetModel for FlatModel {
        fn dim(&self) -> usize {
            self.prior.dim()
        }
        fn prior(&self) -> &Gaussian {
            &self.prior
        }
        fn num_stages(&self) -> usize {
            1
        }
        fn log_likelihood_cumulative(&self, _theta: &Vector, _stage: usize) -> f64 {
            0.0
        }
        fn grad_log_likelihood(&self, _theta: &Vector) -> Vector {
            Vector::zeros(self.dim())
        }
    }

    /// Likelihood depending on the first coordinate only: the inactive
    /// block is perfectly uninformed under the identity split.
    struct IdealAsModel {
        prior: Gaussian,
        data_mean: f64,
        n_data: f64,
    }
    impl TargetModel for IdealAsModel {
        fn dim(&self) -> usize {
            2
        }
        fn prior(&self) -> &Gaussian {
            &self.prior
        }
        fn num_stages(&self) -> usize {
            1
        }
        fn log_likelihood_cumulative(&self, theta: &Vector, stage: usize) -> f64 {
            if stage == 0 {
                return 0.0;
            }
            -0.5 * self.n_data * (theta[0] - self.data_mean).powi(2)
        }
    }

    #[test]
    fn flat_likelihood_symmetric_proposal_always_accepts_near_mode() {
        // constant likelihood and a symmetric proposal: α = prior ratio;
        // at prior scale ≫ step size the ratio is ≈ 1, and exactly 1 when
        // prior density is flat across the step. Use a huge-variance prior
        // and tiny steps: every step must be accepted.
        let model = FlatModel {
            prior: Gaussian::isotropic(Vector::zeros(2), 1e12).unwrap(),
        };
        let proposal = GaussianRandomWalk::isotropic(2, 1e-12).unwrap();
        let mut rng = RngStream::new(31, 0).rng();
        let trace = run_mh(&model, &proposal, 500, Vector::zeros(2), &mut rng).unwrap();
        assert_eq!(trace.active_acceptances, 500);
    }

    #[test]
    fn zero_scale_proposal_freezes_chain() {
        let model = conjugate_2d(1, 32);
        let proposal = GaussianRandomWalk::new(Matrix::zeros(2, 2)).unwrap();
        let mut rng = RngStream::new(33, 0).rng();
        let init = dvector![0.5, -0.5];
        let trace = run_mh(&model, &proposal, 50, init.clone(), &mut rng).unwrap();
        for rec in &trace.records {
            assert_eq!(rec.theta, init);
        }
    }

    #[test]
    fn mh_recovers_conjugate_posterior_mean() {
        let model = conjugate_2d(1, 34);
        let post = model.posterior().unwrap();
        let proposal =
            GaussianRandomWalk::new(post.cov() * (OPTIMAL_RW_SCALE / 2.0)).unwrap();
        let mut rng = RngStream::new(35, 0).rng();
        let trace = run_mh(&model, &proposal, 100_000, post.mean().clone(), &mut rng).unwrap();
        let kept = trace.post_burn_in(0.1);
        for j in 0..2 {
            let xs: Vec<f64> = kept.iter().map(|r| r.theta[j]).collect();
            let mean: f64 = xs.iter().sum::<f64>() / xs.len() as f64;
            let se = crate::diagnostics::autocorr_adjusted_se(&xs);
            assert!(
                (mean - post.mean()[j]).abs() < 3.0 * se,
                "coord {j}: {mean} vs {} (se {se})",
                post.mean()[j]
            );
        }
    }

    #[test]
    fn as_mh_zero_iterations_keeps_initial_state_only() {
        let model = conjugate_2d(1, 36);
        let split = identity_split_2d();
        let fact = factorize_gaussian_prior(model.prior(), &split).unwrap();
        let q_a = GaussianRandomWalk::isotropic(1, 0.5).unwrap();
        let q_i = PriorConditionalProposal(&fact.inactive_given_active);
        let mut rng = RngStream::new(37, 0).rng();
        let trace = run_as_mh(
            &model,
            &split,
            &fact,
            &q_a,
            &q_i,
            4,
            0,
            dvector![0.0],
            &mut rng,
        )
        .unwrap();
        assert_eq!(trace.records.len(), 1);
    }

    #[test]
    fn rejection_bookkeeping_is_bit_identical() {
        let model = conjugate_2d(1, 38);
        let split = identity_split_2d();
        let fact = factorize_gaussian_prior(model.prior(), &split).unwrap();
        // large steps so rejections occur
        let q_a = GaussianRandomWalk::isotropic(1, 100.0).unwrap();
        let q_i = PriorConditionalProposal(&fact.inactive_given_active);
        let mut rng = RngStream::new(39, 0).rng();
        let trace = run_as_mh(
            &model,
            &split,
            &fact,
            &q_a,
            &q_i,
            4,
            200,
            dvector![0.0],
            &mut rng,
        )
        .unwrap();
        let mut saw_rejection = false;
        for m in 1..trace.records.len() {
            let (prev, cur) = (&trace.records[m - 1], &trace.records[m]);
            if !cur.accepted {
                saw_rejection = true;
                assert_eq!(cur.active, prev.active);
                assert_eq!(cur.selected_index, prev.selected_index);
                assert_eq!(
                    cur.log_marginal_estimate.to_bits(),
                    prev.log_marginal_estimate.to_bits()
                );
                assert_eq!(cur.particles, prev.particles);
                assert_eq!(cur.theta, prev.theta);
            }
        }
        assert!(saw_rejection, "test needs at least one rejection");
    }

    #[test]
    fn ideal_as_mwg_accepts_every_inactive_update() {
        // q_i = p_{i|a} and a likelihood that ignores the inactive block:
        // the inactive acceptance ratio is exactly 1.
        let model = IdealAsModel {
            prior: Gaussian::isotropic(Vector::zeros(2), 4.0).unwrap(),
            data_mean: 0.4,
            n_data: 25.0,
        };
        let split = identity_split_2d();
        let fact = factorize_gaussian_prior(model.prior(), &split).unwrap();
        let q_a = GaussianRandomWalk::isotropic(1, 0.2).unwrap();
        let mut rng = RngStream::new(40, 0).rng();
        let trace = run_as_mwg(
            &model,
            &split,
            &fact,
            &BlockUpdateProposal::PriorConditional,
            &q_a,
            300,
            (dvector![0.0], dvector![0.0]),
            &mut rng,
        )
        .unwrap();
        assert_eq!(trace.inactive_acceptances, 300);
    }

    #[test]
    fn flat_likelihood_mwg_accepts_everything() {
        let model = FlatModel {
            prior: Gaussian::isotropic(Vector::zeros(2), 1e12).unwrap(),
        };
        let split = identity_split_2d();
        let fact = factorize_gaussian_prior(model.prior(), &split).unwrap();
        let q_a = GaussianRandomWalk::isotropic(1, 1e-12).unwrap();
        let mut rng = RngStream::new(41, 0).rng();
        let trace = run_as_mwg(
            &model,
            &split,
            &fact,
            &BlockUpdateProposal::PriorConditional,
            &q_a,
            200,
            (dvector![0.0], dvector![0.0]),
            &mut rng,
        )
        .unwrap();
        assert_eq!(trace.inactive_acceptances, 200);
        assert_eq!(trace.active_acceptances, 200);
    }

    #[test]
    fn budget_accounting_matches_formulas() {
        let model = conjugate_2d(4, 42);
        let split = identity_split_2d();
        let fact = factorize_gaussian_prior(model.prior(), &split).unwrap();
        let q_a = GaussianRandomWalk::isotropic(1, 0.5).unwrap();
        let q_i = PriorConditionalProposal(&fact.inactive_given_active);

        let mut rng = RngStream::new(43, 0).rng();
        let trace = run_mh(
            &model,
            &GaussianRandomWalk::isotropic(2, 0.5).unwrap(),
            137,
            Vector::zeros(2),
            &mut rng,
        )
        .unwrap();
        assert_eq!(trace.likelihood_evals, mh_evals(137));

        let trace = run_as_mh(
            &model,
            &split,
            &fact,
            &q_a,
            &q_i,
            7,
            53,
            dvector![0.0],
            &mut rng,
        )
        .unwrap();
        assert_eq!(trace.likelihood_evals, as_mh_evals(7, 53));

        let config = SmcConfig::new(5);
        let trace = run_as_pmmh(
            &model,
            &split,
            &fact,
            &q_a,
            &config,
            11,
            dvector![0.0],
            &mut rng,
        )
        .unwrap();
        assert_eq!(
            trace.likelihood_evals,
            as_pmmh_evals(5, 4, 1, 11, MoveCostRule::IncludeMoves)
        );

        let trace = run_as_mwg(
            &model,
            &split,
            &fact,
            &BlockUpdateProposal::PriorConditional,
            &q_a,
            29,
            (dvector![0.0], dvector![0.0]),
            &mut rng,
        )
        .unwrap();
        assert_eq!(trace.likelihood_evals, as_mwg_evals(29));

        let trace = run_as_mwpg(
            &model,
            &split,
            &fact,
            &BlockUpdateProposal::PriorConditional,
            &config,
            13,
            dvector![0.0],
            &mut rng,
        )
        .unwrap();
        assert_eq!(
            trace.likelihood_evals,
            as_mwpg_evals(5, 4, 1, 13, MoveCostRule::IncludeMoves) + trace.retained_clone_evals
        );
    }

    #[test]
    fn pmmh_single_stage_matches_as_mh_distributionally() {
        // T = 1 PMMH is the IS estimator: on a shared stream the two
        // samplers see identical estimates, so entire traces coincide.
        let model = conjugate_2d(1, 44);
        let split = identity_split_2d();
        let fact = factorize_gaussian_prior(model.prior(), &split).unwrap();
        let q_a = GaussianRandomWalk::isotropic(1, 0.4).unwrap();
        let q_i = PriorConditionalProposal(&fact.inactive_given_active);
        let config = SmcConfig::new(6);

        let mut rng1 = RngStream::new(45, 0).rng();
        let t1 = run_as_mh(
            &model,
            &split,
            &fact,
            &q_a,
            &q_i,
            6,
            50,
            dvector![0.1],
            &mut rng1,
        )
        .unwrap();
        let mut rng2 = RngStream::new(45, 0).rng();
        let t2 = run_as_pmmh(
            &model,
            &split,
            &fact,
            &q_a,
            &config,
            50,
            dvector![0.1],
            &mut rng2,
        )
        .unwrap();
        for (a, b) in t1.records.iter().zip(&t2.records) {
            assert_eq!(a.active, b.active);
            assert_eq!(
                a.log_marginal_estimate.to_bits(),
                b.log_marginal_estimate.to_bits()
            );
            assert_eq!(a.accepted, b.accepted);
        }
    }

    #[test]
    fn mwpg_needs_two_particles() {
        let model = conjugate_2d(2, 46);
        let split = identity_split_2d();
        let fact = factorize_gaussian_prior(model.prior(), &split).unwrap();
        let mut rng = RngStream::new(47, 0).rng();
        let err = run_as_mwpg(
            &model,
            &split,
            &fact,
            &BlockUpdateProposal::PriorConditional,
            &SmcConfig::new(1),
            5,
            dvector![0.0],
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::TooFewParticles(1)));
    }

    #[test]
    fn mwpg_zero_sweeps_keeps_initial_state_only() {
        let model = conjugate_2d(2, 48);
        let split = identity_split_2d();
        let fact = factorize_gaussian_prior(model.prior(), &split).unwrap();
        let mut rng = RngStream::new(49, 0).rng();
        let trace = run_as_mwpg(
            &model,
            &split,
            &fact,
            &BlockUpdateProposal::PriorConditional,
            &SmcConfig::new(4),
            0,
            dvector![0.0],
            &mut rng,
        )
        .unwrap();
        assert_eq!(trace.records.len(), 1);
    }

    #[test]
    fn trace_csv_roundtrip_smoke() {
        let model = conjugate_2d(1, 50);
        let proposal = GaussianRandomWalk::isotropic(2, 0.3).unwrap();
        let mut rng = RngStream::new(51, 0).rng();
        let trace = run_mh(&model, &proposal, 5, Vector::zeros(2), &mut rng).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "iteration,a_0,a_1,theta_0,theta_1,log_estimate,accepted,accepted_inactive,selected_index"
        ));
        assert_eq!(text.lines().count(), 7);
    }
}
