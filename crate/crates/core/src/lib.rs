//! Ranking pre-trained object detectors by how well their features transfer
//! to a target detection dataset.

pub mod baselines;
pub mod bundle;
pub mod cli;
pub mod error;
pub mod evidence;
pub mod geometry;
pub mod ranking;
pub mod scores;

pub use bundle::{read_bundle, write_bundle, FeatureBundle};
pub use error::{Error, Result};
pub use evidence::{maximize_evidence, EvidenceOptions, EvidenceSolution};
pub use geometry::{Normalization, PyramidConfig};
pub use scores::{score_det_logme, ScoreConfig, ZooScores};
