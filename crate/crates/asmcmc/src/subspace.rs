//! Active subspace identification and the associated reparameterisation.
//!
//! The subspace is found from the eigendecomposition of the Monte Carlo
//! estimate `(1/N) Σ ∇log l(θ_m) ∇log l(θ_m)ᵀ` over prior draws. The top
//! eigenvectors span the directions the likelihood is informative about;
//! the rest span the inactive directions. Since the combined basis is
//! orthonormal, `θ = B_a a + B_i i` has unit Jacobian and coordinates are
//! read off by projection.

use nalgebra::SymmetricEigen;
use rand::Rng;
use std::io::{BufReader, Write};
use std::path::Path;

use crate::gaussian::{ConditionalGaussian, Gaussian};
use crate::models::TargetModel;
use crate::{Error, Matrix, Result, Vector};

/// Orthonormal split of parameter space into active and inactive blocks,
/// with the eigenvalue spectrum that produced it.
#[derive(Debug, Clone)]
pub struct SubspaceSplit {
    basis_active: Matrix,
    basis_inactive: Matrix,
    eigenvalues: Vector,
}

impl SubspaceSplit {
    /// Assemble from explicit bases. Validates orthonormality of the
    /// combined basis and the eigenvalue ordering.
    pub fn new(basis_active: Matrix, basis_inactive: Matrix, eigenvalues: Vector) -> Result<Self> {
        let d = basis_active.nrows();
        if basis_inactive.nrows() != d {
            return Err(Error::DimensionMismatch {
                context: "subspace bases",
                expected: d,
                got: basis_inactive.nrows(),
            });
        }
        if basis_active.ncols() + basis_inactive.ncols() != d {
            return Err(Error::DimensionMismatch {
                context: "subspace column count",
                expected: d,
                got: basis_active.ncols() + basis_inactive.ncols(),
            });
        }
        if eigenvalues.len() != d {
            return Err(Error::DimensionMismatch {
                context: "eigenvalue count",
                expected: d,
                got: eigenvalues.len(),
            });
        }
        let split = Self {
            basis_active,
            basis_inactive,
            eigenvalues,
        };
        let dev = split.max_gram_deviation();
        if !(dev <= 1e-6) {
            return Err(Error::InvalidArgument(format!(
                "basis is not orthonormal (max Gram deviation {dev:e})"
            )));
        }
        if split
            .eigenvalues
            .iter()
            .zip(split.eigenvalues.iter().skip(1))
            .any(|(a, b)| b > a)
            || split.eigenvalues.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidArgument(
                "eigenvalues must be finite and nonincreasing".into(),
            ));
        }
        Ok(split)
    }

    pub fn dim(&self) -> usize {
        self.basis_active.nrows()
    }

    pub fn active_dim(&self) -> usize {
        self.basis_active.ncols()
    }

    pub fn inactive_dim(&self) -> usize {
        self.basis_inactive.ncols()
    }

    pub fn basis_active(&self) -> &Matrix {
        &self.basis_active
    }

    pub fn basis_inactive(&self) -> &Matrix {
        &self.basis_inactive
    }

    /// Spectrum of the gradient outer-product matrix, nonincreasing.
    pub fn eigenvalues(&self) -> &Vector {
        &self.eigenvalues
    }

    /// `θ = B_a a + B_i i`.
    pub fn to_theta(&self, active: &Vector, inactive: &Vector) -> Result<Vector> {
        if active.len() != self.active_dim() {
            return Err(Error::DimensionMismatch {
                context: "active coordinates",
                expected: self.active_dim(),
                got: active.len(),
            });
        }
        if inactive.len() != self.inactive_dim() {
            return Err(Error::DimensionMismatch {
                context: "inactive coordinates",
                expected: self.inactive_dim(),
                got: inactive.len(),
            });
        }
        Ok(&self.basis_active * active + &self.basis_inactive * inactive)
    }

    /// `(a, i) = (B_aᵀ θ, B_iᵀ θ)`.
    pub fn from_theta(&self, theta: &Vector) -> Result<(Vector, Vector)> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector",
                expected: self.dim(),
                got: theta.len(),
            });
        }
        Ok((
            self.basis_active.transpose() * theta,
            self.basis_inactive.transpose() * theta,
        ))
    }

    /// Largest entry of `|BᵀB - I|` for the combined basis.
    pub fn max_gram_deviation(&self) -> f64 {
        let d = self.dim();
        let mut combined = Matrix::zeros(d, d);
        combined
            .columns_mut(0, self.active_dim())
            .copy_from(&self.basis_active);
        combined
            .columns_mut(self.active_dim(), self.inactive_dim())
            .copy_from(&self.basis_inactive);
        let gram = combined.transpose() * combined;
        (gram - Matrix::identity(d, d)).abs().max()
    }

    /// Serialise as structured text: dimensions, eigenvalues, then both
    /// bases in column-major order, all at full round-trip precision.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# subspace split\n");
        out.push_str(&format!("dim {}\n", self.dim()));
        out.push_str(&format!("active_dim {}\n", self.active_dim()));
        out.push_str("eigenvalues\n");
        for v in self.eigenvalues.iter() {
            out.push_str(&format!("{v}\n"));
        }
        out.push_str("basis_active\n");
        for v in self.basis_active.iter() {
            out.push_str(&format!("{v}\n"));
        }
        out.push_str("basis_inactive\n");
        for v in self.basis_inactive.iter() {
            out.push_str(&format!("{v}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let parse_header = |line: Option<&str>, key: &str| -> Result<usize> {
            let line = line.ok_or_else(|| Error::Parse(format!("missing `{key}` line")))?;
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| Error::Parse(format!("expected `{key}`, got `{line}`")))?;
            let n: usize = rest
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("bad `{key}` value: {e}")))?;
            if n == 0 || n > 100_000 {
                return Err(Error::Parse(format!("`{key}` out of range: {n}")));
            }
            Ok(n)
        };
        let dim = parse_header(lines.next(), "dim")?;
        let active_dim = parse_header(lines.next(), "active_dim")?;
        if active_dim >= dim {
            return Err(Error::Parse(format!(
                "active_dim {active_dim} must be below dim {dim}"
            )));
        }
        let mut take_block = |name: &str, count: usize| -> Result<Vec<f64>> {
            match lines.next() {
                Some(l) if l == name => {}
                other => {
                    return Err(Error::Parse(format!(
                        "expected `{name}` section, got {other:?}"
                    )))
                }
            }
            let mut vals = Vec::with_capacity(count);
            for _ in 0..count {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Parse(format!("truncated `{name}` section")))?;
                let v: f64 = line
                    .parse()
                    .map_err(|e| Error::Parse(format!("bad number in `{name}`: {e}")))?;
                if !v.is_finite() {
                    return Err(Error::Parse(format!("non-finite value in `{name}`")));
                }
                vals.push(v);
            }
            Ok(vals)
        };
        let eigenvalues = take_block("eigenvalues", dim)?;
        let ba = take_block("basis_active", dim * active_dim)?;
        let bi = take_block("basis_inactive", dim * (dim - active_dim))?;
        if lines.next().is_some() {
            return Err(Error::Parse("trailing content after split data".into()));
        }
        Self::new(
            Matrix::from_vec(dim, active_dim, ba),
            Matrix::from_vec(dim, dim - active_dim, bi),
            Vector::from_vec(eigenvalues),
        )
    }

    pub fn write_to_file<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn read_from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut text = String::new();
        BufReader::new(std::fs::File::open(path)?).read_to_string(&mut text)?;
        Self::from_text(&text)
    }
}

use std::io::Read;

/// Monte Carlo estimate of the expected gradient outer product:
/// `(1/N) Σ_m ∇log l(θ_m) ∇log l(θ_m)ᵀ`, `θ_m ~ prior`.
pub fn estimate_gradient_matrix<R: Rng + ?Sized>(
    model: &dyn TargetModel,
    n_samples: usize,
    rng: &mut R,
) -> Result<Matrix> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument(
            "gradient matrix needs at least one sample".into(),
        ));
    }
    let d = model.dim();
    let mut acc = Matrix::zeros(d, d);
    for m in 0..n_samples {
        let theta = model.prior().sample(rng);
        let grad = model.grad_log_likelihood(&theta);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                index: m,
                point: theta.iter().copied().collect(),
            });
        }
        acc.ger(1.0, &grad, &grad, 1.0);
    }
    acc /= n_samples as f64;
    // ger keeps exact symmetry, but normalising pass guards reductions.
    Ok((&acc + acc.transpose()) * 0.5)
}

/// Eigendecompose a symmetric PSD matrix and split off the top
/// `active_dim` directions.
///
/// Eigenvalues within `-1e-10 * max(1, λ_max)` of zero are clamped to zero;
/// anything more negative indicates a broken gradient and is an error.
/// Degenerate spectra leave eigenvector choice to the solver, so callers
/// should assert subspace invariants rather than vector identity.
pub fn split_from_matrix(c: &Matrix, active_dim: usize) -> Result<SubspaceSplit> {
    let d = c.nrows();
    if c.ncols() != d {
        return Err(Error::DimensionMismatch {
            context: "gradient matrix",
            expected: d,
            got: c.ncols(),
        });
    }
    if active_dim == 0 || active_dim >= d {
        return Err(Error::ActiveDimOutOfRange { active_dim, dim: d });
    }
    let max_asym = (c - c.transpose()).abs().max();
    let scale = c.abs().max().max(1.0);
    if max_asym > 1e-8 * scale {
        return Err(Error::NotSymmetric {
            max_asymmetry: max_asym,
        });
    }
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });
    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let tol = -1e-10 * lambda_max.max(1.0);
    let mut eigenvalues = Vector::zeros(d);
    for (rank, &idx) in order.iter().enumerate() {
        let v = eig.eigenvalues[idx];
        if v < tol {
            return Err(Error::NegativeEigenvalue { value: v });
        }
        eigenvalues[rank] = v.max(0.0);
    }
    let mut basis_active = Matrix::zeros(d, active_dim);
    let mut basis_inactive = Matrix::zeros(d, d - active_dim);
    for (rank, &idx) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(idx);
        if rank < active_dim {
            basis_active.set_column(rank, &col);
        } else {
            basis_inactive.set_column(rank - active_dim, &col);
        }
    }
    SubspaceSplit::new(basis_active, basis_inactive, eigenvalues)
}

/// Estimate the gradient matrix and split in one step.
pub fn identify_subspace<R: Rng + ?Sized>(
    model: &dyn TargetModel,
    n_samples: usize,
    active_dim: usize,
    rng: &mut R,
) -> Result<SubspaceSplit> {
    let c = estimate_gradient_matrix(model, n_samples, rng)?;
    split_from_matrix(&c, active_dim)
}

/// The Gaussian prior factorised over the split, in both directions:
/// `p(a, i) = p_a(a) p_{i|a}(i|a) = p_i(i) p_{a|i}(a|i)`.
///
/// Both marginals and both conditionals are evaluable and samplable; the
/// inverted pieces serve the samplers that swap the roles of the blocks.
#[derive(Debug, Clone)]
pub struct PriorFactorization {
    pub active_marginal: Gaussian,
    pub inactive_given_active: ConditionalGaussian,
    pub inactive_marginal: Gaussian,
    pub active_given_inactive: ConditionalGaussian,
}

/// Rotate a Gaussian prior into split coordinates and factorise it.
pub fn factorize_gaussian_prior(prior: &Gaussian, split: &SubspaceSplit) -> Result<PriorFactorization> {
    let d = split.dim();
    if prior.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "prior dimension",
            expected: d,
            got: prior.dim(),
        });
    }
    let da = split.active_dim();
    let di = split.inactive_dim();
    let mut basis = Matrix::zeros(d, d);
    basis.columns_mut(0, da).copy_from(split.basis_active());
    basis.columns_mut(da, di).copy_from(split.basis_inactive());

    let mean_rot = basis.transpose() * prior.mean();
    let cov_rot = basis.transpose() * prior.cov() * &basis;
    let cov_rot = (&cov_rot + cov_rot.transpose()) * 0.5;

    let mean_a = mean_rot.rows(0, da).into_owned();
    let mean_i = mean_rot.rows(da, di).into_owned();
    let cov_aa = cov_rot.view((0, 0), (da, da)).into_owned();
    let cov_ii = cov_rot.view((da, da), (di, di)).into_owned();
    let cov_ia = cov_rot.view((da, 0), (di, da)).into_owned();

    let conditional = |cov_self: &Matrix,
                       cov_cross: &Matrix, // cov(other, self): other_dim x self_dim? regression uses cov(self,other) inv(other)
                       cov_other: &Matrix,
                       mean_other: &Vector,
                       mean_self: &Vector|
     -> Result<ConditionalGaussian> {
        // regression R = Σ_{self,other} Σ_{other,other}^{-1}
        let chol = nalgebra::Cholesky::new(cov_other.clone()).ok_or(Error::NotPositiveDefinite)?;
        let regression = chol.solve(&cov_cross.transpose()).transpose();
        let schur = cov_self - &regression * cov_cross.transpose();
        let schur = (&schur + schur.transpose()) * 0.5;
        ConditionalGaussian::new(mean_other.clone(), mean_self.clone(), regression, schur)
    };

    Ok(PriorFactorization {
        active_marginal: Gaussian::new(mean_a.clone(), cov_aa.clone())?,
        inactive_given_active: conditional(&cov_ii, &cov_ia, &cov_aa, &mean_a, &mean_i)?,
        inactive_marginal: Gaussian::new(mean_i.clone(), cov_ii.clone())?,
        active_given_inactive: conditional(&cov_aa, &cov_ia.transpose(), &cov_ii, &mean_i, &mean_a)?,
    })
}
