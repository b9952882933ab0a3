//! Python bindings: models, datasets, the distillation losses and the
//! experiment runner.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ::nastykd::autodiff::{Graph, Tensor};
use ::nastykd::datasets::{self, Split};
use ::nastykd::distill::multi_peak_from_probs;
use ::nastykd::experiment::{ExperimentConfig, Runner};
use ::nastykd::models::{self, ModelKind, ModelSpec};
use ::nastykd::objectives::{self, KDParams, NastyParams};
use ::nastykd::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Config(_) | Error::Param(_) | Error::InvalidInput(_) | Error::Dimension { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Tensor::new(vec![rows.len(), cols], rows.concat()).map_err(py_err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

/// Temperature-softened softmax of each row.
#[pyfunction]
#[pyo3(signature = (logits, tau = 1.0))]
fn softmax(logits: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let p = objectives::softmax_temperature_values(&matrix(&logits)?, tau).map_err(py_err)?;
    Ok(to_rows(&p))
}

/// Batch-mean distillation loss of student logits against teacher logits.
#[pyfunction]
#[pyo3(signature = (student, teacher, labels, alpha = 0.9, tau_s = 4.0))]
fn kd_loss(student: Vec<Vec<f64>>, teacher: Vec<Vec<f64>>, labels: Vec<usize>, alpha: f64, tau_s: f64) -> PyResult<f64> {
    let mut g = Graph::new();
    let s = g.constant(matrix(&student)?);
    let t = g.constant(matrix(&teacher)?);
    let l = objectives::kd_loss(&mut g, s, t, &labels, &KDParams { alpha, tau_s }).map_err(py_err)?;
    g.value(l).item().map_err(py_err)
}

/// Batch-mean self-undermining loss of teacher logits against a frozen
/// adversary's logits.
#[pyfunction]
#[pyo3(signature = (teacher, adversary, labels, omega = 0.004, tau_a = 4.0))]
fn nasty_loss(
    teacher: Vec<Vec<f64>>,
    adversary: Vec<Vec<f64>>,
    labels: Vec<usize>,
    omega: f64,
    tau_a: f64,
) -> PyResult<f64> {
    let mut g = Graph::new();
    let t = g.constant(matrix(&teacher)?);
    let a = g.constant(matrix(&adversary)?);
    let l = objectives::nasty_loss(&mut g, t, a, &labels, &NastyParams { omega, tau_a }).map_err(py_err)?;
    g.value(l).item().map_err(py_err)
}

/// Mean number of classes per row whose probability exceeds `threshold`.
#[pyfunction]
#[pyo3(signature = (probs, threshold = 0.1))]
fn multi_peak(probs: Vec<Vec<f64>>, threshold: f64) -> PyResult<f64> {
    multi_peak_from_probs(&matrix(&probs)?, threshold).map_err(py_err)
}

/// Runs an experiment config file and returns its output directory.
#[pyfunction]
fn run_config(path: PathBuf) -> PyResult<String> {
    let cfg = ExperimentConfig::load(&path).map_err(py_err)?;
    let name = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    let dir = Runner::new().run(&cfg, &name).map_err(py_err)?;
    Ok(dir.display().to_string())
}

#[pyclass(name = "Dataset", module = "nastykd", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset(datasets::Dataset);

#[pymethods]
impl PyDataset {
    /// The bundled digits corpus, normalized with train-split statistics.
    #[staticmethod]
    fn digits(split: &str) -> PyResult<Self> {
        let (train, test) = datasets::digits_raw().map_err(py_err)?;
        let (train, test) = datasets::normalize_pair(&train, &test).map_err(py_err)?;
        match split {
            "train" => Ok(PyDataset(train)),
            "test" => Ok(PyDataset(test)),
            other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        datasets::Dataset::load(&path).map(PyDataset).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels().to_vec()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn sample_shape(&self) -> Vec<usize> {
        self.0.sample_shape().to_vec()
    }

    #[getter]
    fn split(&self) -> &'static str {
        match self.0.split() {
            Split::Train => "train",
            Split::Test => "test",
            Split::Synthetic => "synthetic",
        }
    }
}

#[pyclass(name = "Model", module = "nastykd", skip_from_py_object)]
#[derive(Clone)]
struct PyModel(models::Model);

#[pymethods]
impl PyModel {
    /// Builds a freshly initialized model. `kind` is mlp, tiny_cnn or
    /// small_cnn; `widths` overrides the desk widths.
    #[new]
    #[pyo3(signature = (kind, input_shape, num_classes, seed = 0, widths = None))]
    fn new(kind: &str, input_shape: Vec<usize>, num_classes: usize, seed: u64, widths: Option<Vec<usize>>) -> PyResult<Self> {
        let kind: ModelKind = kind.parse().map_err(py_err)?;
        let mut spec = ModelSpec::desk(kind, &input_shape, num_classes);
        if let Some(w) = widths {
            spec.widths = w;
        }
        models::Model::build(&spec, seed).map(PyModel).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        models::Model::load(&path).map(PyModel).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    /// Logits for every sample of `data`, one row per sample.
    fn predict(&self, data: &PyDataset) -> PyResult<Vec<Vec<f64>>> {
        self.0.predict(data.0.inputs()).map(|t| to_rows(&t)).map_err(py_err)
    }

    fn accuracy(&self, data: &PyDataset) -> PyResult<f64> {
        let logits = self.0.predict(data.0.inputs()).map_err(py_err)?;
        let hits = data
            .0
            .labels()
            .iter()
            .enumerate()
            .filter(|&(i, &y)| {
                let row = logits.row(i);
                let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
                best == y
            })
            .count();
        Ok(hits as f64 / data.0.len() as f64)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.spec().kind.as_str()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    fn checksum(&self) -> u64 {
        self.0.checksum()
    }
}

#[pymodule]
#[pyo3(name = "nastykd")]
fn nastykd_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(nasty_loss, m)?)?;
    m.add_function(wrap_pyfunction!(multi_peak, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    Ok(())
}
