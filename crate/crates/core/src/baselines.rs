//! Comparison scores: SFDA (regularized Fisher discriminant posterior) and
//! KNAS (mean of the per-object gradient Gram matrix).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::bundle::FeatureBundle;
use crate::error::{Error, Result};

pub const DEFAULT_SFDA_A: f64 = 1.0;
/// Condition ratio below which the regularized within-scatter gets extra jitter.
pub const CONDITION_FLOOR: f64 = 1e-10;
pub const JITTER: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ScatterPair {
    pub s_b: DMatrix<f64>,
    pub s_w: DMatrix<f64>,
    /// `K x D`
    pub class_means: DMatrix<f64>,
    pub global_mean: DVector<f64>,
    pub class_counts: Vec<usize>,
}

impl ScatterPair {
    pub fn compute(f: &DMatrix<f64>, labels: &[usize], k: usize) -> Result<Self> {
        let (m, d) = f.shape();
        if m == 0 || d == 0 {
            return Err(Error::InvalidInput("empty feature matrix".into()));
        }
        if labels.len() != m {
            return Err(Error::InvalidInput(format!("{} labels for {} rows", labels.len(), m)));
        }
        let mut counts = vec![0usize; k];
        let mut sums = DMatrix::<f64>::zeros(k, d);
        for (i, &c) in labels.iter().enumerate() {
            if c >= k {
                return Err(Error::InvalidInput(format!("label {c} out of range at row {i}")));
            }
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += f.row(i);
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidInput(format!("class {c} has no objects")));
        }
        let class_means = DMatrix::from_fn(k, d, |c, j| sums[(c, j)] / counts[c] as f64);
        let global_mean = DVector::from_fn(d, |j, _| f.column(j).sum() / m as f64);

        let mut s_b = DMatrix::<f64>::zeros(d, d);
        for c in 0..k {
            let diff = class_means.row(c).transpose() - &global_mean;
            s_b += counts[c] as f64 * &diff * diff.transpose();
        }
        let centered = DMatrix::from_fn(m, d, |i, j| f[(i, j)] - class_means[(labels[i], j)]);
        let mut s_w = centered.transpose() * &centered;
        symmetrize(&mut s_w);
        symmetrize(&mut s_b);
        Ok(Self {
            s_b,
            s_w,
            class_means,
            global_mean,
            class_counts: counts,
        })
    }
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let t = a.transpose();
    *a += t;
    *a *= 0.5;
}

#[derive(Debug, Clone)]
pub struct FdaProjection {
    /// `D x D'`, normalized so that `Uᵀ R U = I` for the regularized within-scatter `R`.
    pub u: DMatrix<f64>,
    pub lambda: f64,
    pub a: f64,
    /// Whether diagonal jitter was added to the regularized within-scatter.
    pub jittered: bool,
}

impl FdaProjection {
    pub fn fit(scatter: &ScatterPair, a: f64) -> Result<Self> {
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::InvalidInput(format!("SFDA constant a must be positive, got {a}")));
        }
        let d = scatter.s_w.nrows();
        let k = scatter.class_counts.len();
        let sw_eig = SymmetricEigen::new(scatter.s_w.clone());
        let sigma_max = sw_eig.eigenvalues.max().max(0.0);
        let lambda = (-a * sigma_max).exp();

        let mut r = scatter.s_w.scale(1.0 - lambda) + DMatrix::identity(d, d).scale(lambda);
        let mut eig = SymmetricEigen::new(r.clone());
        let mut jittered = false;
        let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
        if !(lo > CONDITION_FLOOR * hi.abs().max(f64::MIN_POSITIVE)) {
            for i in 0..d {
                r[(i, i)] += JITTER;
            }
            eig = SymmetricEigen::new(r);
            jittered = true;
        }
        let lo = eig.eigenvalues.min();
        if !(lo > 0.0) {
            return Err(Error::Numerical(format!(
                "regularized within-scatter is singular: smallest eigenvalue {lo:e}, largest {:e}, lambda {lambda:e}, \
                 largest within-scatter eigenvalue {sigma_max:e}",
                eig.eigenvalues.max()
            )));
        }
        // W = P diag(r^-1/2) whitens R; FDA directions are eigenvectors of Wᵀ S_b W.
        let inv_sqrt = eig.eigenvalues.map(|v| 1.0 / v.sqrt());
        let w = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt);
        let mut between = w.transpose() * &scatter.s_b * &w;
        symmetrize(&mut between);
        let b_eig = SymmetricEigen::new(between);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|x, y| b_eig.eigenvalues[*y].total_cmp(&b_eig.eigenvalues[*x]));
        let d_proj = (k - 1).min(d);
        let z = DMatrix::from_fn(d, d_proj, |i, j| b_eig.eigenvectors[(i, order[j])]);
        Ok(Self {
            u: w * z,
            lambda,
            a,
            jittered,
        })
    }

    pub fn dim(&self) -> usize {
        self.u.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfdaReport {
    pub score: f64,
    pub lambda: f64,
    pub projection_dim: usize,
    pub jittered: bool,
}

/// Mean softmax posterior of the true class under the Reg-FDA discriminant.
pub fn sfda_score_features(f: &DMatrix<f64>, labels: &[usize], k: usize, a: f64) -> Result<SfdaReport> {
    if k < 2 {
        return Err(Error::NotApplicable(
            "sfda is not applicable to single-class tasks (K=1)".into(),
        ));
    }
    let scatter = ScatterPair::compute(f, labels, k)?;
    let proj = FdaProjection::fit(&scatter, a)?;
    let m = f.nrows();

    // Projected features and means: δ_c(f) = (Uᵀf)·(Uᵀν_c) − ½‖Uᵀν_c‖² + log(M_c/M).
    let fp = f * &proj.u;
    let mp = &scatter.class_means * &proj.u;
    let offsets: Vec<f64> = (0..k)
        .map(|c| -0.5 * mp.row(c).norm_squared() + (scatter.class_counts[c] as f64 / m as f64).ln())
        .collect();
    let mut total = 0.0;
    let mut delta = vec![0.0; k];
    for i in 0..m {
        for c in 0..k {
            delta[c] = fp.row(i).dot(&mp.row(c)) + offsets[c];
        }
        let top = delta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = delta.iter().map(|v| (v - top).exp()).sum();
        total += (delta[labels[i]] - top).exp() / denom;
    }
    let score = total / m as f64;
    if !score.is_finite() {
        return Err(Error::Numerical("sfda posterior is not finite".into()));
    }
    Ok(SfdaReport {
        score,
        lambda: proj.lambda,
        projection_dim: proj.dim(),
        jittered: proj.jittered,
    })
}

pub fn sfda_score(bundle: &FeatureBundle, a: f64) -> Result<SfdaReport> {
    sfda_score_features(&bundle.feature_matrix(), &bundle.labels_usize(), bundle.num_classes, a)
}

/// Gradient kernel `‖Σ_i g_i‖² / M²`, equal to the mean Gram entry.
pub fn knas_score(gradients: &DMatrix<f64>) -> Result<f64> {
    let (m, p) = gradients.shape();
    if m == 0 || p == 0 {
        return Err(Error::InvalidInput("empty gradient matrix".into()));
    }
    if gradients.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("gradient matrix has non-finite entries".into()));
    }
    let sum = gradients.row_sum();
    Ok(sum.norm_squared() / (m as f64 * m as f64))
}

/// Layer-sampled kernel: the gradient columns are `layers` equal-width blocks and
/// the per-layer Gram means are averaged.
pub fn knas_score_layered(gradients: &DMatrix<f64>, layers: usize) -> Result<f64> {
    if layers == 0 || gradients.ncols() % layers != 0 {
        return Err(Error::InvalidInput(format!(
            "gradient width {} is not divisible into {layers} layers",
            gradients.ncols()
        )));
    }
    Ok(knas_score(gradients)? / layers as f64)
}

pub fn knas_score_bundle(bundle: &FeatureBundle, layers: usize) -> Result<f64> {
    let g = bundle
        .gradient_matrix()
        .ok_or_else(|| Error::InvalidInput(format!("bundle '{}' carries no gradients", bundle.model_name)))?;
    knas_score_layered(&g, layers)
}
