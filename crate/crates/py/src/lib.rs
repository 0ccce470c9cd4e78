//! Python bindings. Feature sequences cross the boundary as lists of float
//! lists, with `None` standing in for a missing element.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mmnd_core::approx::{self, CompletionParams, IdentityRefiner};
use mmnd_core::dataset::{self, DataError, FeatureSequence, IncompletenessConfig, PairedSample, SyntheticConfig};
use mmnd_core::eval::{self, SimilarityMatrix, Strategy};
use mmnd_core::gradcheck::{self, CheckedLoss};
use mmnd_core::model::{TaskLoss, TwoTowerModel};
use mmnd_core::train::{self, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn data_err(e: DataError) -> PyErr {
    match e {
        DataError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => value_err(other),
    }
}

fn strategy(name: &str) -> PyResult<Strategy> {
    name.parse().map_err(value_err)
}

fn slots(seq: &FeatureSequence) -> Vec<Option<Vec<f64>>> {
    (0..seq.len()).map(|i| seq.get(i).map(<[f64]>::to_vec)).collect()
}

/// One video-text pair.
#[pyclass(module = "mmnd", name = "Pair", from_py_object)]
#[derive(Clone)]
pub struct PyPair(PairedSample);

#[pymethods]
impl PyPair {
    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }

    #[getter]
    fn label(&self) -> Option<i64> {
        self.0.label
    }

    /// Frames, `None` where missing.
    #[getter]
    fn video(&self) -> Vec<Option<Vec<f64>>> {
        slots(&self.0.video)
    }

    /// Words, `None` where missing.
    #[getter]
    fn text(&self) -> Vec<Option<Vec<f64>>> {
        slots(&self.0.text)
    }

    #[getter]
    fn phrases(&self) -> Option<Vec<String>> {
        self.0.phrases.as_ref().map(|p| p.iter().cloned().collect())
    }

    fn is_complete(&self) -> bool {
        self.0.is_complete()
    }

    fn __repr__(&self) -> String {
        format!(
            "Pair(id={:?}, frames={}/{}, words={}/{})",
            self.0.id,
            self.0.video.present_count(),
            self.0.video.len(),
            self.0.text.present_count(),
            self.0.text.len()
        )
    }
}

/// An ordered list of pairs.
#[pyclass(module = "mmnd", name = "Dataset", from_py_object)]
#[derive(Clone)]
pub struct PyDataset(Vec<PairedSample>);

#[pymethods]
impl PyDataset {
    /// Read a JSONL dataset.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        dataset::load_dataset(path).map(Self).map_err(data_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataset::save_dataset(path, &self.0).map_err(data_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __getitem__(&self, index: isize) -> PyResult<PyPair> {
        let n = self.0.len() as isize;
        let i = if index < 0 { index + n } else { index };
        if !(0..n).contains(&i) {
            return Err(PyIndexError::new_err("pair index out of range"));
        }
        Ok(PyPair(self.0[i as usize].clone()))
    }

    /// Mask ⌊rate·len⌋ elements of every sequence.
    #[pyo3(signature = (video_rate, text_rate, seed = 0))]
    fn corrupt(&self, video_rate: f64, text_rate: f64, seed: u64) -> PyResult<Self> {
        dataset::apply_incompleteness(&self.0, &IncompletenessConfig::new(video_rate, text_rate, seed))
            .map(Self)
            .map_err(data_err)
    }

    /// Fill every missing slot. `pipeline` uses neighbour approximation, in
    /// the model bank's space when `model` is given.
    #[pyo3(signature = (strategy = "pipeline", k = 5, k0 = 3, model = None))]
    fn complete(&self, strategy: &str, k: usize, k0: usize, model: Option<&PyModel>) -> PyResult<Self> {
        let s = self::strategy(strategy)?;
        let params = CompletionParams { k, k0 };
        self.0
            .iter()
            .map(|p| match s {
                Strategy::Pipeline => approx::complete_pair(p, model.map(|m| &m.0.bank), params, &IdentityRefiner)
                    .map(|c| c.pair)
                    .map_err(value_err),
                other => eval::baseline_complete(p, other).map_err(value_err),
            })
            .collect::<PyResult<Vec<_>>>()
            .map(Self)
    }
}

/// Synthetic pairs sharing a latent trajectory per pair.
#[pyfunction]
#[pyo3(signature = (pairs = 64, frames = 16, words = 12, dim = 32, latent_dim = 8, noise = 0.0, keyframes = 8, jitter = 0.2, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn generate(
    pairs: usize,
    frames: usize,
    words: usize,
    dim: usize,
    latent_dim: usize,
    noise: f64,
    keyframes: usize,
    jitter: f64,
    seed: u64,
) -> PyResult<PyDataset> {
    let cfg = SyntheticConfig {
        num_pairs: pairs,
        frames_per_video: frames,
        words_per_text: words,
        dim,
        latent_dim,
        noise_std: noise,
        keyframes,
        keyframe_jitter: jitter,
        seed,
        ..Default::default()
    };
    dataset::generate_synthetic(&cfg).map(PyDataset).map_err(data_err)
}

/// A trained two-tower encoder.
#[pyclass(module = "mmnd", name = "Model", from_py_object)]
#[derive(Clone)]
pub struct PyModel(TwoTowerModel);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        TwoTowerModel::load(&path).map(Self).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.num_scalars()
    }

    /// `(f_v, f_t, f_c)` for one pair, completing it with `strategy` first.
    #[pyo3(signature = (pair, strategy = "pipeline"))]
    fn encode(&self, pair: &PyPair, strategy: &str) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let f = eval::encode_with_strategy(&self.0, &pair.0, self::strategy(strategy)?, CompletionParams::default())
            .map_err(value_err)?;
        Ok((f.f_v, f.f_t, f.f_c))
    }
}

fn train_config(
    data: &[PairedSample],
    config: Option<&str>,
    epochs: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    task: Option<&str>,
) -> PyResult<TrainConfig> {
    let mut cfg: TrainConfig = match config {
        Some(json) => serde_json::from_str(json).map_err(value_err)?,
        None => TrainConfig::default(),
    };
    if let Some(first) = data.first() {
        cfg.model.dim = first.video.dim();
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(l) = lr {
        cfg.lr = l;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    match task {
        Some("mlt") => cfg.task = TaskLoss::Mlt,
        Some("retrieval") => cfg.task = TaskLoss::Retrieval,
        Some(other) => return Err(PyValueError::new_err(format!("unknown task {other:?}"))),
        None => {}
    }
    Ok(cfg)
}

fn curve(report: &train::TrainReport) -> Vec<f64> {
    report.curve.iter().map(|e| e.loss.total).collect()
}

/// Train a teacher on complete pairs. Returns the model and the per-epoch
/// total loss. `config` is a JSON training configuration; the keyword
/// arguments override it.
#[pyfunction]
#[pyo3(signature = (data, epochs = None, lr = None, seed = None, task = None, config = None))]
fn train_teacher(
    py: Python<'_>,
    data: &PyDataset,
    epochs: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    task: Option<&str>,
    config: Option<&str>,
) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = train_config(&data.0, config, epochs, lr, seed, task)?;
    let (model, report) =
        py.detach(|| train::train_teacher(&data.0, &cfg)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((PyModel(model), curve(&report)))
}

/// Train a student against a frozen teacher.
#[pyfunction]
#[pyo3(signature = (data, teacher, epochs = None, lr = None, seed = None, task = None, config = None))]
#[allow(clippy::too_many_arguments)]
fn train_student(
    py: Python<'_>,
    data: &PyDataset,
    teacher: &PyModel,
    epochs: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    task: Option<&str>,
    config: Option<&str>,
) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = train_config(&data.0, config, epochs, lr, seed, task)?;
    let (model, report) = py
        .detach(|| train::train_student(&data.0, &teacher.0, &cfg))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((PyModel(model), curve(&report)))
}

/// Retrieval R@{1,5,10} in both directions, as
/// `{"t2v": {"r1": …, "r5": …, "r10": …}, "v2t": {…}}`.
#[pyfunction]
#[pyo3(signature = (model, data, strategy = "pipeline", video_rate = 0.3, text_rate = 0.3, seed = 0))]
fn evaluate(
    py: Python<'_>,
    model: &PyModel,
    data: &PyDataset,
    strategy: &str,
    video_rate: f64,
    text_rate: f64,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let s = self::strategy(strategy)?;
    let inc = IncompletenessConfig::new(video_rate, text_rate, seed);
    let (t2v, v2t) = py
        .detach(|| eval::evaluate_retrieval(&model.0, &data.0, s, &inc, CompletionParams::default()))
        .map_err(value_err)?;
    let out = pyo3::types::PyDict::new(py);
    for (key, r) in [("t2v", t2v), ("v2t", v2t)] {
        let d = pyo3::types::PyDict::new(py);
        d.set_item("r1", r.r1)?;
        d.set_item("r5", r.r5)?;
        d.set_item("r10", r.r10)?;
        out.set_item(key, d)?;
    }
    Ok(out.into_any().unbind())
}

/// Percentage of rows whose diagonal entry ranks within the top `k`.
#[pyfunction]
fn recall_at_k(similarity: Vec<Vec<f64>>, k: usize) -> PyResult<f64> {
    let n = similarity.len();
    if similarity.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("similarity matrix must be square"));
    }
    let flat: Vec<f64> = similarity.into_iter().flatten().collect();
    let m = Array2::from_shape_vec((n, n), flat).map_err(value_err)?;
    Ok(eval::recall_at_k(&SimilarityMatrix(m), k))
}

/// Finite-difference gradient check; returns `{loss: max relative error}`.
#[pyfunction]
#[pyo3(signature = (points = 2, seed = 0))]
fn grad_check(py: Python<'_>, points: usize, seed: u64) -> PyResult<std::collections::BTreeMap<String, f64>> {
    py.detach(|| {
        CheckedLoss::ALL
            .iter()
            .map(|&l| gradcheck::check_loss(l, points, seed).map(|r| (l.name().to_string(), r.max_rel_error)))
            .collect::<Result<_, _>>()
    })
    .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn mmnd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPair>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(train_student, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add("GRAD_TOLERANCE", gradcheck::TOLERANCE)?;
    Ok(())
}
