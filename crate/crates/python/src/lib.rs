//! Python bindings for the detrank library.

use std::path::PathBuf;

use detrank::baselines::{knas_score_bundle, sfda_score, DEFAULT_SFDA_A};
use detrank::bundle::{read_bundle, synth_bundle, synth_gradients, write_bundle, FeatureBundle};
use detrank::evidence::{maximize_evidence as solve_evidence, EvidenceOptions};
use detrank::geometry::{assign_pyramid_level as pyramid_level, PyramidConfig};
use detrank::ranking::{
    rel_at_1 as rel1, reproduce_tables, sample_subsets as sample, RankRecord, TauVariant,
};
use detrank::scores::{score_det_logme, score_logme, score_model, ScoreConfig};
use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: detrank::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(mu: f64) -> PyResult<ScoreConfig> {
    let cfg = ScoreConfig { mu, ..ScoreConfig::default() };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn records(scores: &[f64], gt: &[f64]) -> PyResult<Vec<RankRecord>> {
    if scores.len() != gt.len() {
        return Err(PyValueError::new_err("scores and gt must have equal length"));
    }
    Ok(scores
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (s, g))| RankRecord::new(format!("m{i:03}"), *s, *g))
        .collect())
}

/// A feature bundle: per-object features, boxes, labels and optional gradients.
#[pyclass(name = "Bundle", module = "detrank_py", from_py_object)]
#[derive(Clone)]
struct PyBundle {
    inner: FeatureBundle,
}

#[pymethods]
impl PyBundle {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: read_bundle(&path).map_err(py_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (objects, dim, classes, quality, seed, gradient_dim = None))]
    fn synth(
        objects: usize,
        dim: usize,
        classes: usize,
        quality: f64,
        seed: u64,
        gradient_dim: Option<usize>,
    ) -> PyResult<Self> {
        let mut inner = synth_bundle(objects, dim, classes, quality, seed).map_err(py_err)?;
        if let Some(g) = gradient_dim {
            inner.gradients = Some(synth_gradients(&inner, g, seed).map_err(py_err)?);
        }
        Ok(Self { inner })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_bundle(&self.inner, &path).map_err(py_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    #[getter]
    fn model_name(&self) -> String {
        self.inner.model_name.clone()
    }

    #[getter]
    fn dataset_name(&self) -> String {
        self.inner.dataset_name.clone()
    }

    #[getter]
    fn num_objects(&self) -> usize {
        self.inner.num_objects
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        self.inner.labels.clone()
    }

    #[getter]
    fn boxes(&self) -> Vec<[f32; 4]> {
        self.inner.boxes.clone()
    }

    #[getter]
    fn has_gradients(&self) -> bool {
        self.inner.gradients.is_some()
    }

    fn features(&self) -> Vec<Vec<f32>> {
        (0..self.inner.num_objects).map(|i| self.inner.feature_row(i).to_vec()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Bundle(model_name={:?}, objects={}, dim={}, classes={})",
            self.inner.model_name, self.inner.num_objects, self.inner.feature_dim, self.inner.num_classes
        )
    }
}

/// Raw U-LogME and IoU-LogME for one bundle.
#[pyfunction]
#[pyo3(signature = (bundle, mu = 1.0))]
fn score<'py>(py: Python<'py>, bundle: &PyBundle, mu: f64) -> PyResult<Bound<'py, PyDict>> {
    let s = score_model(&bundle.inner, &config(mu)?).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("model_name", s.model_name)?;
    d.set_item("u_logme", s.u_logme)?;
    d.set_item("iou_logme", s.iou_logme)?;
    Ok(d)
}

/// Class-label LogME for one bundle.
#[pyfunction]
fn logme(bundle: &PyBundle) -> PyResult<f64> {
    score_logme(&bundle.inner, &ScoreConfig::default()).map_err(py_err)
}

/// Det-LogME over a zoo, ranked best first.
#[pyfunction]
#[pyo3(signature = (bundles, mu = 1.0))]
fn rank<'py>(py: Python<'py>, bundles: Vec<PyBundle>, mu: f64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let zoo: Vec<FeatureBundle> = bundles.into_iter().map(|b| b.inner).collect();
    let z = score_det_logme(&zoo, &config(mu)?).map_err(py_err)?;
    z.ranked()
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("model_name", r.model_name)?;
            d.set_item("u_logme_raw", r.u_logme_raw)?;
            d.set_item("iou_logme_raw", r.iou_logme_raw)?;
            d.set_item("u_norm", r.u_norm)?;
            d.set_item("iou_norm", r.iou_norm)?;
            d.set_item("det_logme", r.det_logme)?;
            Ok(d)
        })
        .collect()
}

#[pyfunction]
#[pyo3(signature = (bundle, a = DEFAULT_SFDA_A))]
fn sfda<'py>(py: Python<'py>, bundle: &PyBundle, a: f64) -> PyResult<Bound<'py, PyDict>> {
    let r = sfda_score(&bundle.inner, a).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("score", r.score)?;
    d.set_item("lambda", r.lambda)?;
    d.set_item("projection_dim", r.projection_dim)?;
    d.set_item("jittered", r.jittered)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (bundle, layers = 1))]
fn knas(bundle: &PyBundle, layers: usize) -> PyResult<f64> {
    knas_score_bundle(&bundle.inner, layers).map_err(py_err)
}

/// Evidence maximization for features `f` (M x D) and targets `y` (M x T).
#[pyfunction]
fn maximize_evidence<'py>(py: Python<'py>, f: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let s = solve_evidence(&matrix(&f)?, &matrix(&y)?, &EvidenceOptions::default()).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("alpha", s.alpha)?;
    d.set_item("beta", s.beta)?;
    d.set_item("logml", s.logml)?;
    d.set_item("iterations", s.iterations)?;
    d.set_item("converged", s.converged)?;
    Ok(d)
}

/// Kendall tau between transferability scores and ground-truth mAP.
#[pyfunction]
#[pyo3(signature = (scores, gt, variant = "plain"))]
fn kendall_tau(scores: Vec<f64>, gt: Vec<f64>, variant: &str) -> PyResult<f64> {
    let v = match variant {
        "plain" => TauVariant::Plain,
        "weighted" => TauVariant::Weighted,
        "hyperbolic" => TauVariant::Hyperbolic,
        other => return Err(PyValueError::new_err(format!("unknown tau variant {other:?}"))),
    };
    v.compute(&records(&scores, &gt)?).map_err(py_err)
}

#[pyfunction]
fn rel_at_1(scores: Vec<f64>, gt: Vec<f64>) -> PyResult<f64> {
    rel1(&records(&scores, &gt)?).map_err(py_err)
}

/// Sorted member indices of each sampled `k`-subset of `0..n`.
#[pyfunction]
fn sample_subsets(n: usize, k: usize, fraction: f64, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    Ok(sample(n, k, fraction, seed)
        .map_err(py_err)?
        .iter()
        .map(|s| s.indices().collect())
        .collect())
}

#[pyfunction]
fn assign_pyramid_level(width: f64, height: f64) -> PyResult<i32> {
    pyramid_level(width, height, &PyramidConfig::default()).map_err(py_err)
}

/// Recompute ranking correlations from fixture score tables.
#[pyfunction]
fn reproduce<'py>(py: Python<'py>, fixtures: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let r = reproduce_tables(&fixtures).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("markdown", r.to_markdown())?;
    d.set_item("csv", r.to_csv().map_err(py_err)?)?;
    d.set_item("ordinal_pass", r.ordinal_pass())?;
    d.set_item("tolerance_pass", r.tolerance_pass())?;
    Ok(d)
}

#[pymodule]
pub fn detrank_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBundle>()?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(logme, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(sfda, m)?)?;
    m.add_function(wrap_pyfunction!(knas, m)?)?;
    m.add_function(wrap_pyfunction!(maximize_evidence, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau, m)?)?;
    m.add_function(wrap_pyfunction!(rel_at_1, m)?)?;
    m.add_function(wrap_pyfunction!(sample_subsets, m)?)?;
    m.add_function(wrap_pyfunction!(assign_pyramid_level, m)?)?;
    m.add_function(wrap_pyfunction!(reproduce, m)?)?;
    Ok(())
}
