//! Python bindings: loss kernels, caption generation, synthetic data, training and evaluation.

use std::path::PathBuf;

use lreid_core::attribute_text::{
    render_text, threshold_attributes_with, AttributePrediction, AttributeSchema, AttributeVector, ManifestAttributes,
    ThresholdOptions, NUM_ATTRIBUTES,
};
use lreid_core::backbone::ImageTensor;
use lreid_core::checkpoint;
use lreid_core::config::RunConfig;
use lreid_core::datakit::{make_synthetic_dataset, SplitConfig, StreamEntry, SynthConfig, TaskStream};
use lreid_core::evalkit::FeatureMode;
use lreid_core::model::ReidModel;
use lreid_core::pipeline::{evaluate as run_evaluate, load_eval_data, load_training_tasks, train as run_train, StreamDatasets};
use lreid_core::{acn, evalkit, lifelong, tga, Error, Matrix};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("expected a non-empty list of equal-length rows"));
    }
    Ok(Matrix::from_rows(&rows))
}

fn prediction(scores: Vec<f64>) -> PyResult<AttributePrediction> {
    let arr: [f64; NUM_ATTRIBUTES] = scores
        .try_into()
        .map_err(|v: Vec<f64>| PyValueError::new_err(format!("expected {NUM_ATTRIBUTES} scores, got {}", v.len())))?;
    Ok(AttributePrediction::from_ordered(arr))
}

fn feature_mode(name: &str) -> PyResult<FeatureMode> {
    match name {
        "global" => Ok(FeatureMode::Global),
        "global-and-attribute" => Ok(FeatureMode::GlobalAndAttribute),
        _ => Err(PyValueError::new_err(format!("unknown feature mode {name:?}"))),
    }
}

/// Sum of absolute pairwise cosines between the rows.
#[pyfunction]
pub fn orthogonal_loss(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    tga::orthogonal_loss(&matrix(rows)?).map_err(to_py)
}

/// Batch-hard triplet loss with Euclidean distances.
#[pyfunction]
#[pyo3(signature = (rows, labels, margin = 0.3))]
pub fn triplet_loss(rows: Vec<Vec<f64>>, labels: Vec<usize>, margin: f64) -> PyResult<f64> {
    tga::triplet_loss(&matrix(rows)?, &labels, margin).map_err(to_py)
}

#[pyfunction]
pub fn ce_loss(logits: Vec<f64>, label: usize) -> PyResult<f64> {
    tga::ce_loss(&logits, label).map_err(to_py)
}

/// `KL(softmax(p / tau) || softmax(q / tau))`.
#[pyfunction]
#[pyo3(signature = (p, q, tau = 2.0))]
pub fn distill_kl(p: Vec<f64>, q: Vec<f64>, tau: f64) -> PyResult<f64> {
    lifelong::distill_kl(&p, &q, tau).map_err(to_py)
}

/// Average precision of a ranked relevance list; `None` when nothing is relevant.
#[pyfunction]
pub fn average_precision(relevant: Vec<bool>) -> Option<f64> {
    evalkit::average_precision(&relevant)
}

/// For each attribute feature row, the index of the most cosine-similar global row.
#[pyfunction]
pub fn match_attributes(features: Vec<Vec<f64>>, global: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    acn::match_attributes(&matrix(features)?, &matrix(global)?).map_err(to_py)
}

/// Thresholds 12 attribute scores (schema order) into flags.
#[pyfunction]
#[pyo3(signature = (scores, threshold = 0.8, lower_body_exclusive = true))]
pub fn threshold_attributes(scores: Vec<f64>, threshold: f64, lower_body_exclusive: bool) -> PyResult<Vec<bool>> {
    let av = threshold_attributes_with(&prediction(scores)?, &ThresholdOptions { threshold, lower_body_exclusive })
        .map_err(to_py)?;
    Ok(av.values().to_vec())
}

/// Caption for 12 attribute flags in schema order.
#[pyfunction]
pub fn render_caption(flags: Vec<bool>) -> PyResult<String> {
    let arr: [bool; NUM_ATTRIBUTES] =
        flags.try_into().map_err(|_| PyValueError::new_err(format!("expected {NUM_ATTRIBUTES} flags")))?;
    Ok(render_text(&AttributeVector::from_flags(arr), &AttributeSchema::default()).as_str().to_string())
}

/// Generates synthetic domains under `out` and returns the path of the task-stream file.
#[pyfunction]
#[pyo3(signature = (out, domains = 5, unseen = 1, seed = 0, identities = 20, images_per_identity = 8, cameras = 4))]
pub fn make_synth(
    out: PathBuf,
    domains: usize,
    unseen: usize,
    seed: u64,
    identities: usize,
    images_per_identity: usize,
    cameras: usize,
) -> PyResult<String> {
    if domains == 0 || unseen >= domains {
        return Err(PyValueError::new_err("unseen must leave at least one seen domain"));
    }
    let mut entries = Vec::new();
    for i in 0..domains {
        let cfg = SynthConfig { n_identities: identities, images_per_identity, n_cameras: cameras, ..SynthConfig::domain(i, seed) };
        make_synthetic_dataset(&cfg, &SplitConfig { seed, ..Default::default() }, &out.join(&cfg.dataset)).map_err(to_py)?;
        entries.push(StreamEntry { dir: PathBuf::from(&cfg.dataset), seen: i < domains - unseen });
    }
    let path = out.join("stream.txt");
    std::fs::write(&path, TaskStream { entries }.to_text()).map_err(|e| PyOSError::new_err(e.to_string()))?;
    Ok(path.display().to_string())
}

fn run_config(config_toml: Option<&str>) -> PyResult<RunConfig> {
    RunConfig::from_toml_str(config_toml.unwrap_or("")).map_err(to_py)
}

/// Trains over a task stream; returns the checkpoint paths in task order.
#[pyfunction]
#[pyo3(signature = (stream, out_dir, config_toml = None))]
pub fn train(stream: PathBuf, out_dir: PathBuf, config_toml: Option<&str>) -> PyResult<Vec<String>> {
    let cfg = run_config(config_toml)?;
    let data = StreamDatasets::load(&TaskStream::load(&stream).map_err(to_py)?).map_err(to_py)?;
    let tasks = load_training_tasks(&data.seen, &ManifestAttributes).map_err(to_py)?;
    let (_, report) = run_train(&cfg, &tasks, Some(&out_dir), &mut |_, _| Ok(())).map_err(to_py)?;
    Ok(report.checkpoints.iter().map(|p| p.display().to_string()).collect())
}

/// A trained or freshly initialised re-identification model.
#[pyclass(module = "lreid")]
pub struct Model {
    inner: ReidModel,
}

#[pymethods]
impl Model {
    /// Random initial model from a run configuration (TOML text; defaults when omitted).
    #[new]
    #[pyo3(signature = (seed = 0, config_toml = None))]
    pub fn new(seed: u64, config_toml: Option<&str>) -> PyResult<Self> {
        let cfg = run_config(config_toml)?;
        let inner = ReidModel::new(cfg.model, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load(&path).map_err(to_py)?.0 })
    }

    #[getter]
    pub fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    pub fn n_views(&self) -> usize {
        self.inner.config.n_views()
    }

    #[getter]
    pub fn dim(&self) -> usize {
        self.inner.config.dim()
    }

    pub fn param_hash(&self) -> String {
        self.inner.param_hash()
    }

    /// The caption this model would use for 12 attribute scores.
    pub fn caption(&self, scores: Vec<f64>) -> PyResult<String> {
        let (_, text) = self.inner.caption(&prediction(scores)?).map_err(to_py)?;
        Ok(text.as_str().to_string())
    }

    /// Global and attribute-wise representations (`N × D` each) of one CHW image in [0, 1].
    pub fn represent(&self, pixels: Vec<f32>, scores: Vec<f64>) -> PyResult<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)> {
        let image = ImageTensor::new(pixels).map_err(to_py)?;
        let (av, caption) = self.inner.caption(&prediction(scores)?).map_err(to_py)?;
        let text = self.inner.text_embedding(&caption).map_err(to_py)?;
        let reps = self.inner.represent(&image, &text, &av).map_err(to_py)?;
        Ok((reps.global.to_rows(), reps.attribute.map(|a| a.ag.to_rows())))
    }
}

/// Evaluates a checkpoint on the seen and unseen datasets of a stream.
///
/// Returns `{"datasets": {name: {"map", "rank1"}}, "seen_avg": (map, rank1) | None,
/// "unseen_avg": ..., "text": report}`.
#[pyfunction]
#[pyo3(signature = (checkpoint_path, stream, feature = "global"))]
pub fn evaluate<'py>(py: Python<'py>, checkpoint_path: PathBuf, stream: PathBuf, feature: &str) -> PyResult<Bound<'py, PyDict>> {
    let (model, _) = checkpoint::load(&checkpoint_path).map_err(to_py)?;
    let data = StreamDatasets::load(&TaskStream::load(&stream).map_err(to_py)?).map_err(to_py)?;
    let load = |v: &[lreid_core::datakit::DatasetSplits]| {
        v.iter().map(|s| load_eval_data(s, &ManifestAttributes)).collect::<Result<Vec<_>, _>>().map_err(to_py)
    };
    let (seen, unseen) = (load(&data.seen)?, load(&data.unseen)?);
    let mut cfg = RunConfig { model: model.config.clone(), ..RunConfig::default() };
    cfg.eval.feature = feature_mode(feature)?;
    let report = run_evaluate(&model, &cfg, &seen, &unseen).map_err(to_py)?;

    let out = PyDict::new(py);
    let datasets = PyDict::new(py);
    for r in &report.datasets {
        let d = PyDict::new(py);
        d.set_item("map", r.map)?;
        d.set_item("rank1", r.rank1)?;
        datasets.set_item(&r.dataset, d)?;
    }
    out.set_item("datasets", datasets)?;
    out.set_item("seen_avg", report.seen_avg.map(|a| (a.map, a.rank1)))?;
    out.set_item("unseen_avg", report.unseen_avg.map(|a| (a.map, a.rank1)))?;
    out.set_item("text", report.to_text())?;
    Ok(out)
}

/// Hash of a run configuration, stable under key reordering.
#[pyfunction]
#[pyo3(signature = (config_toml = None))]
pub fn config_hash(config_toml: Option<&str>) -> PyResult<String> {
    Ok(run_config(config_toml)?.hash())
}

#[pymodule]
fn lreid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(orthogonal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(distill_kl, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(match_attributes, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_attributes, m)?)?;
    m.add_function(wrap_pyfunction!(render_caption, m)?)?;
    m.add_function(wrap_pyfunction!(make_synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add("NUM_ATTRIBUTES", NUM_ATTRIBUTES)?;
    m.add("ATTRIBUTE_NAMES", AttributeSchema::default().category_names().map(str::to_string).collect::<Vec<_>>())?;
    Ok(())
}
