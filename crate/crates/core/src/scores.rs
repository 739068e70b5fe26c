//! Transferability scores built on the evidence solver: per-task LogME,
//! the unified U-LogME, the IoU-based IoU-LogME and their zoo-level
//! combination Det-LogME.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::FeatureBundle;
use crate::error::{Error, Result};
use crate::evidence::{
    log_evidence, maximize_evidence_with, spectral_decompose, EvidenceOptions, EvidenceSolution, SpectralCache,
};
use crate::geometry::{expand_unified_labels, iou_corners, Normalization, PyramidConfig};

/// How the class-slotted weight matrix is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum UnifiedFit {
    /// One joint solve against the unified `M x 4K` label matrix.
    #[default]
    Joint,
    /// Solve against the `M x 4` box matrix, then tile the `D x 4` weights over all
    /// class blocks and score the tiled weights against the unified labels.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub mu: f64,
    pub normalization: Normalization,
    pub pyramid: PyramidConfig,
    pub evidence: EvidenceOptions,
    pub fit: UnifiedFit,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            normalization: Normalization::Center,
            pyramid: PyramidConfig::default(),
            evidence: EvidenceOptions::default(),
            fit: UnifiedFit::Joint,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::InvalidInput(format!("mu must be a finite value >= 0, got {}", self.mu)));
        }
        self.pyramid.validate()
    }
}

/// Normalized box targets, one `[f64; 4]` per object.
pub fn box_targets(bundle: &FeatureBundle, norm: Normalization) -> Result<Vec<[f64; 4]>> {
    (0..bundle.num_objects)
        .map(|i| {
            norm.encode(&bundle.corner_box(i), bundle.image(i))
                .map_err(|e| Error::Validation(format!("row {i}: {e}")))
        })
        .collect()
}

fn solve(f: &DMatrix<f64>, y: DMatrix<f64>, cache: &SpectralCache, cfg: &ScoreConfig) -> Result<EvidenceSolution> {
    maximize_evidence_with(f, &y, cache, &cfg.evidence)
}

/// Baseline LogME: independent single-target solves for each box coordinate and,
/// when there is more than one class, each one-hot class column.
pub fn score_logme(bundle: &FeatureBundle, cfg: &ScoreConfig) -> Result<f64> {
    cfg.validate()?;
    let f = bundle.feature_matrix();
    let cache = spectral_decompose(&f)?;
    let targets = box_targets(bundle, cfg.normalization)?;
    let m = bundle.num_objects;

    let mut regression = 0.0;
    for j in 0..4 {
        let y = DMatrix::from_fn(m, 1, |i, _| targets[i][j]);
        regression += solve(&f, y, &cache, cfg)?.logml;
    }
    regression /= 4.0;

    if bundle.num_classes < 2 {
        return Ok(regression);
    }
    let mut classification = 0.0;
    for c in 0..bundle.num_classes {
        let y = DMatrix::from_fn(m, 1, |i, _| if bundle.labels[i] as usize == c { 1.0 } else { 0.0 });
        classification += solve(&f, y, &cache, cfg)?.logml;
    }
    classification /= bundle.num_classes as f64;
    Ok(0.5 * (regression + classification))
}

/// U-LogME: joint evidence of the features for the class-slotted box targets.
/// Returns the normalized log evidence and the solution used by IoU-LogME.
pub fn score_u_logme(bundle: &FeatureBundle, cfg: &ScoreConfig) -> Result<(f64, EvidenceSolution)> {
    cfg.validate()?;
    let f = bundle.feature_matrix();
    let cache = spectral_decompose(&f)?;
    let targets = box_targets(bundle, cfg.normalization)?;
    let unified = expand_unified_labels(&targets, &bundle.labels_usize(), bundle.num_classes)?;
    match cfg.fit {
        UnifiedFit::Joint => {
            let sol = maximize_evidence_with(&f, &unified.y, &cache, &cfg.evidence)?;
            Ok((sol.logml, sol))
        }
        UnifiedFit::Literal => {
            let b = DMatrix::from_fn(bundle.num_objects, 4, |i, j| targets[i][j]);
            let mut sol = maximize_evidence_with(&f, &b, &cache, &cfg.evidence)?;
            let k = bundle.num_classes;
            let tiled = DMatrix::from_fn(bundle.feature_dim, 4 * k, |r, c| sol.m[(r, c % 4)]);
            sol.logml = log_evidence(&f, &unified.y, &cache, sol.alpha, sol.beta, &tiled, cfg.evidence.norm);
            sol.m = tiled;
            Ok((sol.logml, sol))
        }
    }
}

/// Mean IoU between per-object linear predictions `f_i · m'_i` (the class block of
/// the unified weights) and the ground-truth boxes.
pub fn score_iou_logme(bundle: &FeatureBundle, solution: &EvidenceSolution, cfg: &ScoreConfig) -> Result<f64> {
    let (d, k) = (bundle.feature_dim, bundle.num_classes);
    if solution.m.shape() != (d, 4 * k) {
        return Err(Error::InvalidInput(format!(
            "weight matrix is {}x{}, expected {}x{}",
            solution.m.nrows(),
            solution.m.ncols(),
            d,
            4 * k
        )));
    }
    let targets = box_targets(bundle, cfg.normalization)?;
    let total: f64 = (0..bundle.num_objects)
        .map(|i| {
            let c = bundle.labels[i] as usize;
            let f = bundle.feature_row(i);
            let mut pred = [0.0; 4];
            for (j, p) in pred.iter_mut().enumerate() {
                *p = f
                    .iter()
                    .enumerate()
                    .map(|(r, v)| *v as f64 * solution.m[(r, 4 * c + j)])
                    .sum();
            }
            let norm = cfg.normalization;
            iou_corners(norm.corners(&pred), norm.corners(&targets[i]))
        })
        .sum();
    Ok(total / bundle.num_objects as f64)
}

/// Raw per-model scores before zoo normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub model_name: String,
    pub u_logme: f64,
    pub iou_logme: f64,
}

pub fn score_model(bundle: &FeatureBundle, cfg: &ScoreConfig) -> Result<ModelScores> {
    let (u, sol) = score_u_logme(bundle, cfg)?;
    let iou = score_iou_logme(bundle, &sol, cfg)?;
    Ok(ModelScores {
        model_name: bundle.model_name.clone(),
        u_logme: u,
        iou_logme: iou,
    })
}

/// Min-max scaling to `[0, 1]`; a constant vector maps to 0.5 everywhere.
pub fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; v.len()];
    }
    v.iter().map(|x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooScores {
    pub model_ids: Vec<String>,
    pub u_logme_raw: Vec<f64>,
    pub iou_logme_raw: Vec<f64>,
    pub u_norm: Vec<f64>,
    pub iou_norm: Vec<f64>,
    pub det_logme: Vec<f64>,
    pub mu: f64,
}

/// One output row of the zoo score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub model_name: String,
    pub u_logme_raw: f64,
    pub iou_logme_raw: f64,
    pub u_norm: f64,
    pub iou_norm: f64,
    pub det_logme: f64,
}

pub const SCORE_COLUMNS: [&str; 6] = ["model_name", "u_logme_raw", "iou_logme_raw", "u_norm", "iou_norm", "det_logme"];

impl ZooScores {
    pub fn from_raw(model_ids: Vec<String>, u_raw: Vec<f64>, iou_raw: Vec<f64>, mu: f64) -> Result<Self> {
        if model_ids.len() < 2 {
            return Err(Error::InvalidInput(
                "det-logme requires a zoo of at least 2 models (normalization is undefined for one)".into(),
            ));
        }
        if u_raw.len() != model_ids.len() || iou_raw.len() != model_ids.len() {
            return Err(Error::InvalidInput("score vectors differ in length from the model list".into()));
        }
        if !(mu >= 0.0) {
            return Err(Error::InvalidInput(format!("mu must be >= 0, got {mu}")));
        }
        let u_norm = min_max_normalize(&u_raw);
        let iou_norm = min_max_normalize(&iou_raw);
        let det_logme = u_norm.iter().zip(&iou_norm).map(|(u, i)| u + mu * i).collect();
        Ok(Self {
            model_ids,
            u_logme_raw: u_raw,
            iou_logme_raw: iou_raw,
            u_norm,
            iou_norm,
            det_logme,
            mu,
        })
    }

    pub fn len(&self) -> usize {
        self.model_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model_ids.is_empty()
    }

    pub fn records(&self) -> Vec<ScoreRecord> {
        (0..self.len())
            .map(|i| ScoreRecord {
                model_name: self.model_ids[i].clone(),
                u_logme_raw: self.u_logme_raw[i],
                iou_logme_raw: self.iou_logme_raw[i],
                u_norm: self.u_norm[i],
                iou_norm: self.iou_norm[i],
                det_logme: self.det_logme[i],
            })
            .collect()
    }

    /// Records sorted by Det-LogME descending, ties by model name.
    pub fn ranked(&self) -> Vec<ScoreRecord> {
        let mut recs = self.records();
        recs.sort_by(|a, b| {
            b.det_logme
                .total_cmp(&a.det_logme)
                .then_with(|| a.model_name.cmp(&b.model_name))
        });
        recs
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in self.ranked() {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Score every model in a zoo and combine the normalized U-LogME and IoU-LogME.
pub fn score_det_logme(zoo: &[FeatureBundle], cfg: &ScoreConfig) -> Result<ZooScores> {
    cfg.validate()?;
    if zoo.len() < 2 {
        return Err(Error::InvalidInput("det-logme requires a zoo of at least 2 models".into()));
    }
    let k = zoo[0].num_classes;
    if let Some(b) = zoo.iter().find(|b| b.num_classes != k) {
        return Err(Error::InvalidInput(format!(
            "zoo must share the class count: '{}' has K={} but '{}' has K={}",
            zoo[0].model_name, k, b.model_name, b.num_classes
        )));
    }
    let scored: Vec<ModelScores> = zoo.par_iter().map(|b| score_model(b, cfg)).collect::<Result<_>>()?;
    ZooScores::from_raw(
        scored.iter().map(|s| s.model_name.clone()).collect(),
        scored.iter().map(|s| s.u_logme).collect(),
        scored.iter().map(|s| s.iou_logme).collect(),
        cfg.mu,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::synth_bundle;
    use proptest::prelude::*;

    #[test]
    fn normalize_edge_cases() {
        assert_eq!(min_max_normalize(&[3.0, 3.0, 3.0]), vec![0.5; 3]);
        assert_eq!(min_max_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn zoo_of_one_is_rejected() {
        let b = synth_bundle(30, 8, 2, 0.5, 1).unwrap();
        assert!(score_det_logme(&[b], &ScoreConfig::default()).is_err());
    }

    #[test]
    fn mixed_class_counts_rejected() {
        let a = synth_bundle(30, 8, 2, 0.5, 1).unwrap();
        let b = synth_bundle(30, 8, 3, 0.5, 2).unwrap();
        let err = score_det_logme(&[a, b], &ScoreConfig::default()).unwrap_err();
        assert!(err.to_string().contains("share the class count"));
    }

    #[test]
    fn single_class_unified_equals_plain_box_fit() {
        let b = synth_bundle(60, 8, 1, 0.6, 3).unwrap();
        let cfg = ScoreConfig::default();
        let (u, _) = score_u_logme(&b, &cfg).unwrap();
        let f = b.feature_matrix();
        let t = box_targets(&b, Normalization::Center).unwrap();
        let y = DMatrix::from_fn(60, 4, |i, j| t[i][j]);
        let direct = crate::evidence::maximize_evidence(&f, &y, &cfg.evidence).unwrap();
        assert!((u - direct.logml).abs() < 1e-12);
    }

    #[test]
    fn single_class_logme_is_regression_only() {
        let b = synth_bundle(60, 8, 1, 0.6, 3).unwrap();
        let cfg = ScoreConfig::default();
        let f = b.feature_matrix();
        let t = box_targets(&b, Normalization::Center).unwrap();
        let mut reg = 0.0;
        for j in 0..4 {
            let y = DMatrix::from_fn(60, 1, |i, _| t[i][j]);
            reg += crate::evidence::maximize_evidence(&f, &y, &cfg.evidence).unwrap().logml;
        }
        assert!((score_logme(&b, &cfg).unwrap() - reg / 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_iou() {
        let b = synth_bundle(40, 8, 2, 0.9, 4).unwrap();
        let cfg = ScoreConfig::default();
        let (_, mut sol) = score_u_logme(&b, &cfg).unwrap();
        sol.m.fill(0.0);
        assert_eq!(score_iou_logme(&b, &sol, &cfg).unwrap(), 0.0);
        let bad = EvidenceSolution {
            m: DMatrix::zeros(3, 3),
            ..sol
        };
        assert!(score_iou_logme(&b, &bad, &cfg).is_err());
    }

    #[test]
    fn noiseless_predictions_nearly_exact() {
        let b = synth_bundle(200, 24, 2, 1.0, 5).unwrap();
        let cfg = ScoreConfig::default();
        let (_, sol) = score_u_logme(&b, &cfg).unwrap();
        let iou = score_iou_logme(&b, &sol, &cfg).unwrap();
        assert!(iou >= 0.99, "iou {iou}");
    }

    #[test]
    fn literal_fit_and_border_normalization_run() {
        let b = synth_bundle(80, 12, 2, 0.7, 6).unwrap();
        for cfg in [
            ScoreConfig {
                fit: UnifiedFit::Literal,
                ..Default::default()
            },
            ScoreConfig {
                normalization: Normalization::Border,
                ..Default::default()
            },
        ] {
            let s = score_model(&b, &cfg).unwrap();
            assert!(s.u_logme.is_finite());
            assert!((0.0..=1.0).contains(&s.iou_logme));
        }
    }

    #[test]
    fn mu_zero_matches_unified_ranking() {
        let zoo: Vec<_> = [0.2, 0.5, 0.9, 0.4]
            .iter()
            .enumerate()
            .map(|(i, q)| synth_bundle(60, 12, 2, *q, 10 + i as u64).unwrap())
            .collect();
        let cfg = ScoreConfig {
            mu: 0.0,
            ..Default::default()
        };
        let z = score_det_logme(&zoo, &cfg).unwrap();
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|a, b| v[*b].total_cmp(&v[*a]));
            idx
        };
        assert_eq!(order(&z.det_logme), order(&z.u_logme_raw));
    }

    proptest! {
        #[test]
        fn affine_invariance(
            raw in proptest::collection::vec((-10.0f64..10.0, 0.0f64..1.0), 2..12),
            a in 0.01f64..100.0,
            shift in -50.0f64..50.0,
            mu in 0.0f64..3.0,
        ) {
            let ids: Vec<String> = (0..raw.len()).map(|i| format!("m{i}")).collect();
            let u: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let iou: Vec<f64> = raw.iter().map(|r| r.1).collect();
            let base = ZooScores::from_raw(ids.clone(), u.clone(), iou.clone(), mu).unwrap();
            let moved = ZooScores::from_raw(ids, u.iter().map(|x| a * x + shift).collect(), iou, mu).unwrap();
            for (x, y) in base.det_logme.iter().zip(&moved.det_logme) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            for v in base.u_norm.iter().chain(&base.iou_norm) {
                prop_assert!((0.0..=1.0).contains(v));
            }
            for i in 0..base.len() {
                prop_assert!((base.det_logme[i] - (base.u_norm[i] + mu * base.iou_norm[i])).abs() < 1e-15);
            }
        }
    }
}
