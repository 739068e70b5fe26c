//! Evidence maximization for a Bayesian linear model with isotropic Gaussian
//! prior (precision `alpha`) and Gaussian noise (precision `beta`), shared
//! across all target columns.
//!
//! The fast path diagonalizes `FᵀF` once and evaluates every iterate in the
//! eigenbasis; [`naive_maximize_evidence`] forms and factors
//! `A = αI + βFᵀF` on every iteration and serves as a cross-check.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues of `FᵀF` below this (scaled by `max(1, σ_max)`) are treated as zero.
pub const EIGEN_FLOOR: f64 = 1e-10;
/// Floor applied to `‖Fm − Y‖²` and `‖m‖²` inside the hyper-parameter updates.
pub const RESIDUAL_FLOOR: f64 = 1e-12;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 200;

/// What the log evidence is divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NormDenominator {
    /// `M·T`: one unit per scalar observation.
    #[default]
    Observations,
    /// `M`: one unit per object.
    Objects,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvidenceOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub norm: NormDenominator,
}

impl Default for EvidenceOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            norm: NormDenominator::Observations,
        }
    }
}

/// Eigendecomposition `FᵀF = V diag(σ) Vᵀ`.
#[derive(Debug, Clone)]
pub struct SpectralCache {
    pub v: DMatrix<f64>,
    pub sigma: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct EvidenceSolution {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Posterior mean weights, `D x T`.
    pub m: DMatrix<f64>,
    pub logml: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn check_finite(name: &str, a: &DMatrix<f64>) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} contains non-finite values")))
    }
}

pub fn spectral_decompose(f: &DMatrix<f64>) -> Result<SpectralCache> {
    check_finite("feature matrix", f)?;
    let gram = f.tr_mul(f);
    let eig = SymmetricEigen::try_new(gram, f64::EPSILON, 0).ok_or_else(|| {
        Error::Numerical(format!(
            "symmetric eigendecomposition of {}x{} Gram matrix did not converge",
            f.ncols(),
            f.ncols()
        ))
    })?;
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let floor = EIGEN_FLOOR * top.max(1.0);
    let sigma = eig.eigenvalues.map(|s| if s < floor { 0.0 } else { s });
    Ok(SpectralCache {
        v: eig.eigenvectors,
        sigma,
    })
}

fn check_problem(f: &DMatrix<f64>, y: &DMatrix<f64>, opts: &EvidenceOptions) -> Result<()> {
    if f.nrows() != y.nrows() {
        return Err(Error::InvalidInput(format!(
            "features have {} rows but targets have {}",
            f.nrows(),
            y.nrows()
        )));
    }
    if f.nrows() < 2 || f.ncols() == 0 || y.ncols() == 0 {
        return Err(Error::InvalidInput(format!(
            "evidence needs M >= 2, D >= 1, T >= 1; got M={} D={} T={}",
            f.nrows(),
            f.ncols(),
            y.ncols()
        )));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::InvalidInput("tolerance and iteration cap must be positive".into()));
    }
    check_finite("feature matrix", f)?;
    check_finite("target matrix", y)
}

fn denominator(norm: NormDenominator, m: usize, t: usize) -> f64 {
    match norm {
        NormDenominator::Observations => (m * t) as f64,
        NormDenominator::Objects => m as f64,
    }
}

/// Normalized log evidence at fixed `(alpha, beta)` for weights `m`.
///
/// `log_det_a` is `log|αI + βFᵀF|`.
#[allow(clippy::too_many_arguments)]
pub fn log_evidence_terms(
    n_obj: usize,
    dim: usize,
    n_targets: usize,
    alpha: f64,
    beta: f64,
    residual_sq: f64,
    weight_sq: f64,
    log_det_a: f64,
    norm: NormDenominator,
) -> f64 {
    let (mf, df, tf) = (n_obj as f64, dim as f64, n_targets as f64);
    let total = 0.5 * mf * tf * beta.ln() + 0.5 * df * tf * alpha.ln()
        - 0.5 * mf * tf * (2.0 * PI).ln()
        - 0.5 * beta * residual_sq
        - 0.5 * alpha * weight_sq
        - 0.5 * tf * log_det_a;
    total / denominator(norm, n_obj, n_targets)
}

/// Evaluate the normalized log evidence of `(F, Y)` at a given `(alpha, beta, m)`.
pub fn log_evidence(
    f: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cache: &SpectralCache,
    alpha: f64,
    beta: f64,
    m: &DMatrix<f64>,
    norm: NormDenominator,
) -> f64 {
    let residual = (f * m - y).norm_squared();
    let log_det: f64 = cache.sigma.iter().map(|s| (alpha + beta * s).ln()).sum();
    log_evidence_terms(
        f.nrows(),
        f.ncols(),
        y.ncols(),
        alpha,
        beta,
        residual,
        m.norm_squared(),
        log_det,
        norm,
    )
}

struct Iterate {
    m: DMatrix<f64>,
    gamma: f64,
    weight_sq: f64,
    residual_sq: f64,
    log_det: f64,
}

/// Shared fixed-point loop; `step` evaluates `m`, `γ`, `log|A|` at `(α, β)`.
fn fixed_point<S>(f: &DMatrix<f64>, y: &DMatrix<f64>, opts: &EvidenceOptions, mut step: S) -> Result<EvidenceSolution>
where
    S: FnMut(f64, f64) -> Result<(DMatrix<f64>, f64, f64)>,
{
    let (n_obj, n_targets) = (f.nrows(), y.ncols());
    let observations = (n_obj * n_targets) as f64;
    let eval = |step: &mut S, alpha: f64, beta: f64| -> Result<Iterate> {
        let (m, gamma, log_det) = step(alpha, beta)?;
        let residual_sq = (f * &m - y).norm_squared();
        Ok(Iterate {
            weight_sq: m.norm_squared(),
            m,
            gamma,
            residual_sq,
            log_det,
        })
    };

    let (mut alpha, mut beta) = (1.0f64, 1.0f64);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let it = eval(&mut step, alpha, beta)?;
        let new_alpha = it.gamma / it.weight_sq.max(RESIDUAL_FLOOR);
        let new_beta = (observations - it.gamma).max(f64::EPSILON) / it.residual_sq.max(RESIDUAL_FLOOR);
        if !(new_alpha.is_finite() && new_beta.is_finite() && new_alpha > 0.0 && new_beta > 0.0) {
            return Err(Error::Numerical(format!(
                "hyper-parameters left the positive reals at iteration {iterations}: alpha={new_alpha}, beta={new_beta}"
            )));
        }
        let done = ((new_alpha - alpha) / alpha).abs() < opts.tol && ((new_beta - beta) / beta).abs() < opts.tol;
        alpha = new_alpha;
        beta = new_beta;
        if done {
            converged = true;
            break;
        }
    }

    let it = eval(&mut step, alpha, beta)?;
    let logml = log_evidence_terms(
        n_obj,
        f.ncols(),
        n_targets,
        alpha,
        beta,
        it.residual_sq,
        it.weight_sq,
        it.log_det,
        opts.norm,
    );
    if converged && !logml.is_finite() {
        return Err(Error::Numerical(format!("log evidence is not finite (alpha={alpha}, beta={beta})")));
    }
    Ok(EvidenceSolution {
        alpha,
        beta,
        gamma: it.gamma,
        m: it.m,
        logml,
        iterations,
        converged,
    })
}

/// Maximize the evidence using a precomputed eigendecomposition of `FᵀF`.
pub fn maximize_evidence_with(
    f: &DMatrix<f64>,
    y: &DMatrix<f64>,
    cache: &SpectralCache,
    opts: &EvidenceOptions,
) -> Result<EvidenceSolution> {
    check_problem(f, y, opts)?;
    if cache.sigma.len() != f.ncols() || cache.v.shape() != (f.ncols(), f.ncols()) {
        return Err(Error::InvalidInput("spectral cache does not match feature dimension".into()));
    }
    let n_targets = y.ncols() as f64;
    // Vᵀ(FᵀY), fixed across iterations
    let projected = cache.v.tr_mul(&f.tr_mul(y));
    let sigma = &cache.sigma;
    fixed_point(f, y, opts, |alpha, beta| {
        let mut z = projected.clone();
        for (i, mut row) in z.row_iter_mut().enumerate() {
            row *= beta / (alpha + beta * sigma[i]);
        }
        let m = &cache.v * z;
        let gamma = n_targets * sigma.iter().map(|s| beta * s / (alpha + beta * s)).sum::<f64>();
        let log_det = sigma.iter().map(|s| (alpha + beta * s).ln()).sum();
        Ok((m, gamma, log_det))
    })
}

pub fn maximize_evidence(f: &DMatrix<f64>, y: &DMatrix<f64>, opts: &EvidenceOptions) -> Result<EvidenceSolution> {
    check_problem(f, y, opts)?;
    let cache = spectral_decompose(f)?;
    maximize_evidence_with(f, y, &cache, opts)
}

/// Same fixed point as [`maximize_evidence`], but with an explicit Cholesky
/// factorization and inverse of `A` on every iteration.
pub fn naive_maximize_evidence(f: &DMatrix<f64>, y: &DMatrix<f64>, opts: &EvidenceOptions) -> Result<EvidenceSolution> {
    check_problem(f, y, opts)?;
    let d = f.ncols();
    let n_targets = y.ncols() as f64;
    let gram = f.tr_mul(f);
    let fty = f.tr_mul(y);
    fixed_point(f, y, opts, |alpha, beta| {
        let a = DMatrix::<f64>::identity(d, d) * alpha + &gram * beta;
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("A is not positive definite at alpha={alpha}, beta={beta}")))?;
        let a_inv = chol.inverse();
        let m = (&a_inv * &fty) * beta;
        // Σ βσ/(α+βσ) = D − α·tr(A⁻¹)
        let gamma = n_targets * (d as f64 - alpha * a_inv.trace());
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok((m, gamma, log_det))
    })
}
