//! Subspace-selection and run-quality diagnostics.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::samplers::TraceRecord;
use crate::{Error, Matrix, Result, Vector};

/// Eigen-spectrum summary with spectral-gap candidates.
#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    /// Nonincreasing eigenvalues (tiny negatives clamped to zero).
    pub eigenvalues: Vec<f64>,
    /// `λ_j / λ_{j+1}` for `j = 1..d-1`; infinite where `λ_{j+1} = 0` and
    /// `λ_j > 0`, NaN where both vanish.
    pub gap_ratios: Vec<f64>,
    /// Candidate active dimensions: positions whose gap ratio exceeds the
    /// threshold and whose leading eigenvalue is non-negligible.
    pub candidates: Vec<usize>,
}

/// Eigendecompose a symmetric matrix and flag spectral gaps larger than
/// `gap_threshold`. Candidates are invariant to positive rescaling of the
/// matrix.
pub fn spectrum_report(c: &Matrix, gap_threshold: f64) -> Result<SpectrumReport> {
    let d = c.nrows();
    if c.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "spectrum matrix",
            expected: d,
            got: c.ncols(),
        });
    }
    let max_asym = (c - c.transpose()).abs().max();
    if max_asym > 1e-8 * c.abs().max().max(1.0) {
        return Err(Error::NotSymmetric {
            max_asymmetry: max_asym,
        });
    }
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    let lambda_max = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let clamp = 1e-10 * lambda_max.max(1.0);
    for v in eigenvalues.iter_mut() {
        if v.abs() < clamp || *v < 0.0 {
            *v = v.max(0.0);
        }
    }
    // treat solver-noise eigenvalues as exact zeros for gap purposes
    let negligible = |v: f64| v <= clamp;
    let mut gap_ratios = Vec::with_capacity(d.saturating_sub(1));
    let mut candidates = Vec::new();
    for j in 0..d.saturating_sub(1) {
        let (top, bottom) = (eigenvalues[j], eigenvalues[j + 1]);
        let ratio = if negligible(top) && negligible(bottom) {
            f64::NAN
        } else if negligible(bottom) {
            f64::INFINITY
        } else {
            top / bottom
        };
        gap_ratios.push(ratio);
        if ratio > gap_threshold && !negligible(top) {
            candidates.push(j + 1);
        }
    }
    Ok(SpectrumReport {
        eigenvalues,
        gap_ratios,
        candidates,
    })
}

/// Euclidean distance between a posterior-mean estimate and a reference.
pub fn posterior_mean_error(estimate: &Vector, reference: &Vector) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            context: "posterior mean error",
            expected: reference.len(),
            got: estimate.len(),
        });
    }
    Ok((estimate - reference).norm())
}

/// Fractions of samples whose functional lies below and above the
/// threshold (ties excluded). Defaults pair with `θ₁ + θ₂` on the mixture
/// target for mode bookkeeping.
pub fn mode_occupancy<F>(
    records: &[TraceRecord],
    functional: F,
    threshold: f64,
) -> Result<(f64, f64)>
where
    F: Fn(&Vector) -> f64,
{
    if records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let n = records.len() as f64;
    let mut below = 0usize;
    let mut above = 0usize;
    for rec in records {
        let v = functional(&rec.theta);
        if v < threshold {
            below += 1;
        } else if v > threshold {
            above += 1;
        }
    }
    Ok((below as f64 / n, above as f64 / n))
}

/// Integrated autocorrelation time by Geyer's initial positive sequence:
/// sum paired autocorrelations while the pair sums stay positive.
pub fn integrated_autocorrelation_time(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return 1.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var: f64 = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let acov = |lag: usize| -> f64 {
        xs[..n - lag]
            .iter()
            .zip(&xs[lag..])
            .map(|(&a, &b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / n as f64
    };
    let mut tau = 1.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = (acov(lag) + acov(lag + 1)) / var;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    tau
}

/// Monte Carlo standard error of the sample mean, inflated by the
/// integrated autocorrelation time.
pub fn autocorr_adjusted_se(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::INFINITY;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var: f64 =
        xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    let tau = integrated_autocorrelation_time(xs);
    (var * tau / n as f64).sqrt()
}

/// One algorithm × seed outcome in a comparison study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub algorithm: String,
    pub seed: u64,
    pub error: f64,
    pub likelihood_evals: u64,
}

/// Error distributions of several algorithms on a shared problem.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn push(&mut self, row: ComparisonRow) {
        self.rows.push(row);
    }

    pub fn algorithms(&self) -> Vec<String> {
        let mut names: Vec<String> = self.rows.iter().map(|r| r.algorithm.clone()).collect();
        names.sort();
        names.dedup();
        names
    }

    /// Median posterior-mean error of one algorithm.
    pub fn median_error(&self, algorithm: &str) -> Option<f64> {
        let mut errs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.algorithm == algorithm)
            .map(|r| r.error)
            .collect();
        if errs.is_empty() {
            return None;
        }
        errs.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
        let mid = errs.len() / 2;
        Some(if errs.len() % 2 == 1 {
            errs[mid]
        } else {
            0.5 * (errs[mid - 1] + errs[mid])
        })
    }

    /// Long-format CSV: one row per seed × algorithm × metric.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "algorithm,seed,metric,value")?;
        for row in &self.rows {
            writeln!(w, "{},{},error,{}", row.algorithm, row.seed, row.error)?;
            writeln!(
                w,
                "{},{},likelihood_evals,{}",
                row.algorithm, row.seed, row.likelihood_evals
            )?;
        }
        Ok(())
    }
}

/// Posterior mean from a long reference MH run.
///
/// The proposal covariance is bootstrapped in two pilot rounds (the first
/// at prior scale, the second rescaled by the first's estimate) before the
/// long run; targets with prior-scale ridges are not explorable otherwise.
/// Returns the estimate together with the chain's acceptance rate.
pub fn reference_posterior_mean(
    model: &dyn crate::models::TargetModel,
    pilot_steps: usize,
    reference_steps: usize,
    stream: crate::RngStream,
) -> Result<(Vector, f64)> {
    use crate::samplers::{iterated_pilot_stats, run_mh, GaussianRandomWalk};
    let d = model.dim();
    let identity = Matrix::identity(d, d);
    let (mean, cov) = iterated_pilot_stats(
        model,
        4,
        pilot_steps,
        0.2,
        Vector::zeros(d),
        stream.substream(0),
    )?;
    let proposal = GaussianRandomWalk::new(crate::samplers::scaled_block_covariance(
        &cov, &identity, 1.0,
    ))?;
    let trace = run_mh(
        model,
        &proposal,
        reference_steps,
        mean,
        &mut stream.substream(1).rng(),
    )?;
    let kept = trace.post_burn_in(0.1);
    let mut mean = Vector::zeros(d);
    for rec in kept {
        mean += &rec.theta;
    }
    mean /= kept.len() as f64;
    Ok((mean, trace.acceptance_rate()))
}

/// A persisted reference posterior mean with its provenance, so
/// comparisons do not rerun the long reference chain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReferencePosterior {
    pub model: String,
    pub seed: u64,
    pub steps: u64,
    pub mean: Vec<f64>,
}

impl ReferencePosterior {
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("reference serialisation: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("reference file: {e}")))
    }

    pub fn mean_vector(&self) -> Vector {
        Vector::from_vec(self.mean.clone())
    }
}
